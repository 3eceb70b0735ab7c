"""Seeded synthetic scenarios with known ground truth.

Two generators share one placement plan per scenario: a diagnostic-corpus
generator for the profiling stage, and an inference-record generator (with
a differentiable surrogate readout) for the guidance stage.  All draws go
through ``numpy.random.default_rng`` (PCG64), so a scenario is fully
determined by its spec.

Head roles in inference records:

* planted heads: one compact blob inside the target region, and a readout
  that makes the prediction depend on that region;
* noise heads: several scattered blobs, no useful readout;
* entropy decoys: a compact blob in the wrong place with no readout (they
  fool the focus channel only);
* gradient decoys: a slightly dispersed pair of blobs in the wrong place
  with a strong readout there (they fool the gradient channel only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .tensor_store import (
    DiagnosticCorpus,
    DiagnosticRecord,
    HeadId,
    HeadTable,
    InferenceRecord,
    SequenceLayout,
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to regenerate a synthetic scenario byte-for-byte."""

    grid_side: int = 24
    n_layers: int = 4
    n_heads: int = 4
    planted_heads: tuple[HeadId, ...] = (HeadId(0, 0),)
    planted_region: tuple[int, int, int, int] = (8, 8, 14, 14)
    noise_level: float = 0.05
    seed: int = 0
    patch_size: int = 14
    n_text_tokens: int = 8
    n_special_tokens: int = 2
    n_entropy_decoys: int = 0
    n_gradient_decoys: int = 0

    def validated(self) -> "ScenarioSpec":
        if self.grid_side < 2:
            raise ValidationError(f"grid side {self.grid_side} must be >= 2")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValidationError("geometry must be positive")
        if self.noise_level < 0:
            raise ValidationError(f"noise level {self.noise_level} must be >= 0")
        if self.patch_size < 1:
            raise ValidationError("patch size must be >= 1")
        if self.n_text_tokens < 1 or self.n_special_tokens < 0:
            raise ValidationError("need at least one text token")
        r0, c0, r1, c1 = self.planted_region
        if not (0 <= r0 < r1 <= self.grid_side and 0 <= c0 < c1 <= self.grid_side):
            raise ValidationError(f"planted region {self.planted_region} outside grid")
        if not self.planted_heads:
            raise ValidationError("need at least one planted head")
        for h in self.planted_heads:
            if not (0 <= h.layer < self.n_layers and 0 <= h.head < self.n_heads):
                raise ValidationError(f"planted head {h} outside geometry")
        if len(set(self.planted_heads)) != len(self.planted_heads):
            raise ValidationError("planted heads contain duplicates")
        if self.n_entropy_decoys < 0 or self.n_gradient_decoys < 0:
            raise ValidationError("decoy counts must be >= 0")
        n_total = self.n_layers * self.n_heads
        n_extra = self.n_entropy_decoys + self.n_gradient_decoys
        if len(self.planted_heads) + n_extra > n_total:
            raise ValidationError("more role heads than geometry provides")
        return self

    @property
    def all_heads(self) -> tuple[HeadId, ...]:
        return tuple(
            HeadId(l, h) for l in range(self.n_layers) for h in range(self.n_heads)
        )

    def layout(self) -> SequenceLayout:
        """Token layout: specials, then image patches, then text."""
        n_vis = self.grid_side * self.grid_side
        ns = self.n_special_tokens
        total = ns + n_vis + self.n_text_tokens
        return SequenceLayout(
            total_len=total,
            valid_indices=np.arange(ns, total),
            visual_indices=np.arange(ns, ns + n_vis),
        )


# ---------------------------------------------------------------------------
# diagnostic corpus


def gen_diagnostic_corpus(spec: ScenarioSpec, n_records: int) -> DiagnosticCorpus:
    """Generate a profiling corpus where only the planted heads track masks.

    Every record draws a small rectangular answer mask inside the planted
    region.  Planted heads peak somewhere in that mask; all other heads
    peak uniformly over the valid tokens.  Off-peak mass is exponential
    noise scaled by ``noise_level``.
    """
    spec = spec.validated()
    if n_records < 1:
        raise ValidationError(f"n_records {n_records} must be >= 1")
    rng = np.random.default_rng(spec.seed)
    layout = spec.layout()
    heads = spec.all_heads
    n_heads_total = len(heads)
    planted_rows = np.array(
        [heads.index(h) for h in spec.planted_heads], dtype=np.int64
    )
    valid = layout.valid_indices
    visual_start = int(layout.visual_indices[0])
    text_positions = np.arange(
        visual_start + spec.grid_side * spec.grid_side, layout.total_len
    )
    r0, c0, r1, c1 = spec.planted_region

    records = []
    for _ in range(n_records):
        mh = int(rng.integers(1, min(3, r1 - r0) + 1))
        mw = int(rng.integers(1, min(3, c1 - c0) + 1))
        mr = int(rng.integers(r0, r1 - mh + 1))
        mc = int(rng.integers(c0, c1 - mw + 1))
        rr, cc = np.meshgrid(np.arange(mr, mr + mh), np.arange(mc, mc + mw), indexing="ij")
        mask_positions = visual_start + (rr * spec.grid_side + cc).ravel()
        mask = np.zeros(layout.total_len, dtype=np.uint8)
        mask[mask_positions] = 1

        rows = spec.noise_level * rng.standard_exponential((n_heads_total, layout.total_len))
        peaks = valid[rng.integers(0, valid.size, n_heads_total)]
        peaks[planted_rows] = rng.choice(mask_positions, size=planted_rows.size)
        rows[np.arange(n_heads_total), peaks] = rows[:, valid].max(axis=1) + 1.0
        rows /= rows.sum(axis=1, keepdims=True)

        records.append(
            DiagnosticRecord(
                token_index=int(rng.choice(text_positions)),
                layout=layout,
                mask=mask,
                attn=HeadTable(heads, rows.astype(np.float32)),
            )
        )
    return DiagnosticCorpus(
        n_layers=spec.n_layers, n_heads=spec.n_heads, records=records
    )


# ---------------------------------------------------------------------------
# inference records and the surrogate readout


@dataclass(frozen=True)
class SurrogateModel:
    """Logistic readout over per-head attention.

    The log probability of the scored token is ``log sigmoid(z)`` with
    ``z = bias + sum_h <readout_h, attn_h>``, which keeps the closed-form
    attention sensitivity one line long.
    """

    readouts: HeadTable
    bias: float

    def logit(self, attn) -> float:
        z = self.bias
        for h in self.readouts:
            if h in attn:
                z += float(np.dot(np.asarray(attn[h], dtype=np.float64),
                                  np.asarray(self.readouts[h], dtype=np.float64)))
        return z

    def prob(self, attn) -> float:
        z = self.logit(attn)
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    def log_prob(self, attn) -> float:
        z = self.logit(attn)
        if z >= 0:
            return -math.log1p(math.exp(-z))
        return z - math.log1p(math.exp(z))

    def sensitivities(self, attn) -> HeadTable:
        """d log_prob / d attn per head: ``(1 - p) * readout``."""
        scale = 1.0 - self.prob(attn)
        heads = [h for h in self.readouts if h in attn]
        rows = np.stack([scale * np.asarray(self.readouts[h], dtype=np.float64)
                         for h in heads])
        return HeadTable(heads, rows)


@dataclass(frozen=True)
class _HeadPlan:
    role: str
    map: np.ndarray
    readout_box: tuple[int, int, int, int] | None
    readout_gain: float


def _gaussian_blob(n: int, center: tuple[float, float], sigma: float) -> np.ndarray:
    r = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    d2 = (r - center[0]) ** 2 + (c - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _far_cell(rng, n: int, avoid: tuple[float, float], min_dist: float, margin: int) -> tuple[int, int]:
    for _ in range(200):
        r = int(rng.integers(margin, n - margin))
        c = int(rng.integers(margin, n - margin))
        if math.hypot(r - avoid[0], c - avoid[1]) >= min_dist:
            return r, c
    return r, c


# Placement margins per distractor role; the grid must leave each draw
# a non-empty interior.
_ROLE_MIN_GRID = {"noise": 5, "entropy_decoy": 7, "gradient_decoy": 9}


@lru_cache(maxsize=64)
def _plan_heads(spec: ScenarioSpec) -> tuple[_HeadPlan, ...]:
    """Draw every head's attention map and readout placement for a scenario."""
    spec = spec.validated()
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.grid_side
    n_roles = len(spec.planted_heads) + spec.n_entropy_decoys + spec.n_gradient_decoys
    needed = {"planted": 2}
    if spec.n_entropy_decoys:
        needed["entropy_decoy"] = _ROLE_MIN_GRID["entropy_decoy"]
    if spec.n_gradient_decoys:
        needed["gradient_decoy"] = _ROLE_MIN_GRID["gradient_decoy"]
    if n_roles < spec.n_layers * spec.n_heads:
        needed["noise"] = _ROLE_MIN_GRID["noise"]
    floor_side = max(needed.values())
    if n < floor_side:
        role = max(needed, key=needed.get)
        raise ValidationError(
            f"grid side {n} too small to place {role} heads; need >= {floor_side}"
        )
    r0, c0, r1, c1 = spec.planted_region
    region_center = ((r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0)
    region_sigma = max(0.8, min(r1 - r0, c1 - c0) / 4.0)
    away = math.hypot(r1 - r0, c1 - c0) / 2.0 + 4.0

    roles: dict[HeadId, str] = {h: "planted" for h in spec.planted_heads}
    rest = [h for h in spec.all_heads if h not in roles]
    for h in rest[: spec.n_entropy_decoys]:
        roles[h] = "entropy_decoy"
    for h in rest[spec.n_entropy_decoys : spec.n_entropy_decoys + spec.n_gradient_decoys]:
        roles[h] = "gradient_decoy"

    plans = []
    for head in spec.all_heads:
        role = roles.get(head, "noise")
        floor = spec.noise_level * rng.random((n, n))
        if role == "planted":
            center = (
                region_center[0] + rng.uniform(-0.75, 0.75),
                region_center[1] + rng.uniform(-0.75, 0.75),
            )
            grid = floor + _gaussian_blob(n, center, region_sigma)
            box = (r0, c0, r1, c1)
            gain = 1.0
        elif role == "entropy_decoy":
            cell = _far_cell(rng, n, region_center, away, margin=3)
            grid = floor + _gaussian_blob(n, cell, region_sigma)
            box = None
            gain = 0.0
        elif role == "gradient_decoy":
            cell = _far_cell(rng, n, region_center, away, margin=4)
            offset = (0, 2) if rng.random() < 0.5 else (2, 0)
            second = (cell[0] + offset[0], cell[1] + offset[1])
            grid = (
                floor
                + _gaussian_blob(n, cell, 0.5)
                + _gaussian_blob(n, second, 0.5)
            )
            box = (
                max(0, min(cell[0], second[0]) - 1),
                max(0, min(cell[1], second[1]) - 1),
                min(n, max(cell[0], second[0]) + 2),
                min(n, max(cell[1], second[1]) + 2),
            )
            gain = float(rng.uniform(0.9, 1.4))
        else:
            grid = floor.copy()
            for _ in range(int(rng.integers(3, 6))):
                cell = (int(rng.integers(2, n - 2)), int(rng.integers(2, n - 2)))
                grid += float(rng.uniform(0.6, 1.0)) * _gaussian_blob(
                    n, cell, float(rng.uniform(0.8, 1.4))
                )
            box = None
            gain = 0.0
        vec = grid.ravel()
        plans.append(
            _HeadPlan(role=role, map=vec / vec.sum(), readout_box=box, readout_gain=gain)
        )
    return tuple(plans)


def make_surrogate(spec: ScenarioSpec) -> SurrogateModel:
    """Readout whose gradient points at each useful head's blob region.

    Per-head readout vectors are indicators over the head's target box,
    scaled so the raw gradient affinity of a planted head is 1 and decoy
    affinities land in their drawn gain range.
    """
    spec = spec.validated()
    plans = _plan_heads(spec)
    n = spec.grid_side
    rows = []
    for plan in plans:
        row = np.zeros(n * n, dtype=np.float64)
        if plan.readout_box is not None and plan.readout_gain > 0:
            r0, c0, r1, c1 = plan.readout_box
            box = np.zeros((n, n), dtype=bool)
            box[r0:r1, c0:c1] = True
            sel = box.ravel()
            mass = float(plan.map[sel].sum())
            row[sel] = plan.readout_gain / mass
        rows.append(row)
    return SurrogateModel(
        readouts=HeadTable(spec.all_heads, np.stack(rows)), bias=-2.0
    )


def gen_inference_record(
    spec: ScenarioSpec, *, with_grad: bool = True
) -> InferenceRecord:
    """One prediction step over the scenario's planted and distractor heads."""
    spec = spec.validated()
    plans = _plan_heads(spec)
    attn = HeadTable(
        spec.all_heads, np.stack([p.map for p in plans]).astype(np.float32)
    )
    surrogate = make_surrogate(spec)
    grad = None
    if with_grad:
        sens = surrogate.sensitivities(attn)
        grad = HeadTable(
            attn.heads, np.stack([sens[h] for h in attn.heads]).astype(np.float32)
        )
    return InferenceRecord(
        grid_side=spec.grid_side,
        image_w=spec.grid_side * spec.patch_size,
        image_h=spec.grid_side * spec.patch_size,
        patch_size=spec.patch_size,
        predicted_token="answer",
        log_prob=surrogate.log_prob(attn),
        attn=attn,
        grad=grad,
    )
