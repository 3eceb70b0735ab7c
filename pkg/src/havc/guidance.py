"""Stage two: refine expert heads at inference time and build the crop map.

For one prediction step, each expert head's attention over the image grid
is assessed twice: a spatial-entropy check that rewards a single compact
blob, and a gradient check that rewards attention the answer probability
actually depends on.  Surviving heads are fused, the best few softmax-
weighted, and their attention maps summed into a guidance map from which
the crop box is cut.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import HavcError, PipelineError, ValidationError
from .spatial import (
    BoxParams,
    CropBox,
    ImageGeometry,
    connected_components,
    extract_bbox,
    mean_pairwise_distance,
    normalize01,
    otsu_threshold,
    patch_bbox,
    to_pixel_box,
)
from .tensor_store import HeadId, InferenceRecord

log = logging.getLogger("havc.guidance")


@dataclass(frozen=True)
class EntropyParams:
    """Spatial-entropy weights and the survival threshold.

    The component term charges ``component_weight`` per blob beyond the
    first; the dispersion term charges for mean centroid spread relative
    to the grid diagonal.  Heads survive only strictly below ``threshold``.
    """

    component_weight: float = 0.25
    dispersion_weight: float = 0.75
    threshold: float = 0.3


@dataclass(frozen=True)
class FusionParams:
    alpha: float = 0.4
    top_k: int = 8
    temperature: float = 0.1
    norm_scope: str = "survivors"


@dataclass(frozen=True)
class GuidanceParams:
    entropy: EntropyParams = EntropyParams()
    fusion: FusionParams = FusionParams()
    box: BoxParams = BoxParams()
    otsu_bins: int = 256
    connectivity: int = 8

    def validated(self) -> "GuidanceParams":
        e, f = self.entropy, self.fusion
        if e.component_weight < 0 or e.dispersion_weight < 0:
            raise ValidationError("entropy weights must be non-negative")
        if not (0.0 <= e.threshold <= 1.0):
            raise ValidationError(f"entropy threshold {e.threshold} outside [0, 1]")
        if not (0.0 <= f.alpha <= 1.0):
            raise ValidationError(f"alpha {f.alpha} outside [0, 1]")
        if f.top_k < 1:
            raise ValidationError(f"top_k {f.top_k} must be >= 1")
        if not (f.temperature > 0):
            raise ValidationError(f"temperature {f.temperature} must be positive")
        if f.norm_scope not in ("survivors", "experts"):
            raise ValidationError(f"unknown norm scope {f.norm_scope!r}")
        if self.otsu_bins < 2:
            raise ValidationError(f"otsu_bins {self.otsu_bins} must be >= 2")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")
        return self


@dataclass
class HeadAssessment:
    """Per-head measurements collected on the way to selection."""

    head: HeadId
    entropy: float
    grad_score: float
    fused: float = math.nan
    weight: float = math.nan


@dataclass
class GuidanceResult:
    selected: list[HeadAssessment]
    guidance_map: np.ndarray
    patch_box: tuple[int, int, int, int]
    crop: CropBox
    fallback_used: bool
    grad_available: bool


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except HavcError as exc:
        raise PipelineError(name, str(exc)) from exc


def reshape_attention(vec: np.ndarray, grid_side: int) -> np.ndarray:
    """Row-major reshape of a visual-token vector onto the patch grid."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != grid_side * grid_side:
        raise ValidationError(
            f"attention vector of length {arr.shape} does not fill a "
            f"{grid_side}x{grid_side} grid"
        )
    return arr.reshape(grid_side, grid_side)


def spatial_entropy(
    grid: np.ndarray,
    params: EntropyParams = EntropyParams(),
    *,
    bins: int = 256,
    connectivity: int = 8,
) -> float:
    """Dispersion score in [0, 1] for one attention grid.

    The grid is min-max normalized, split by the between-class-variance
    threshold, and its foreground components counted and spread-measured.
    Zero means one tight blob; the score saturates at 1.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValidationError(f"attention grid must be square, got {grid.shape}")
    norm = normalize01(grid)
    _, mask = otsu_threshold(norm, bins=bins)
    comps = connected_components(mask, connectivity=connectivity)
    if comps.count == 0:
        # Constant maps carry no location signal at all.
        return 1.0
    spread = mean_pairwise_distance(comps.centroids)
    return entropy_from_stats(comps.count, spread, grid.shape[0], params)


def entropy_from_stats(
    component_count: int,
    mean_distance: float,
    grid_side: int,
    params: EntropyParams = EntropyParams(),
) -> float:
    """Combine a component count and centroid spread into the entropy score."""
    if component_count < 1:
        raise ValidationError("component count must be >= 1")
    d_max = math.hypot(grid_side, grid_side)
    raw = (
        params.component_weight * (component_count - 1)
        + params.dispersion_weight * (mean_distance / d_max)
    )
    return min(raw, 1.0)


def gradient_score(attn_vec: np.ndarray, sens_vec: np.ndarray) -> float:
    """Inner product of attention with positively-clipped sensitivity."""
    a = np.asarray(attn_vec, dtype=np.float64)
    s = np.asarray(sens_vec, dtype=np.float64)
    if a.shape != s.shape or a.ndim != 1:
        raise ValidationError(
            f"attention and sensitivity shapes differ: {a.shape} vs {s.shape}"
        )
    return float(np.dot(a, np.maximum(s, 0.0)))


def assess_heads(
    record: InferenceRecord,
    heads: list[HeadId],
    params: GuidanceParams = GuidanceParams(),
) -> list[HeadAssessment]:
    """Measure entropy and gradient affinity for each given head."""
    out = []
    for head in heads:
        grid = reshape_attention(record.attn[head], record.grid_side)
        ent = spatial_entropy(
            grid, params.entropy, bins=params.otsu_bins, connectivity=params.connectivity
        )
        if record.grad is not None:
            g = gradient_score(record.attn[head], record.grad[head])
        else:
            g = 0.0
        out.append(HeadAssessment(head=head, entropy=ent, grad_score=g))
    return out


def _minmax(values: np.ndarray) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def fuse_scores(
    assessments: list[HeadAssessment],
    alpha: float,
    scope: list[HeadAssessment] | None = None,
) -> np.ndarray:
    """Blend normalized focus (1 - entropy) with normalized gradient score.

    Min-max constants come from ``scope`` when given (it must contain the
    assessed heads), otherwise from ``assessments`` themselves.  Constant
    channels normalize to zero.
    """
    if not assessments:
        raise ValidationError("nothing to fuse: no assessed heads")
    pool = scope if scope is not None else assessments
    focus_pool = np.array([1.0 - a.entropy for a in pool])
    grad_pool = np.array([a.grad_score for a in pool])

    def norm(values: np.ndarray, pool_values: np.ndarray) -> np.ndarray:
        lo = pool_values.min()
        hi = pool_values.max()
        if hi == lo:
            return np.zeros_like(values)
        return (values - lo) / (hi - lo)

    focus = np.array([1.0 - a.entropy for a in assessments])
    grads = np.array([a.grad_score for a in assessments])
    fused = alpha * norm(focus, focus_pool) + (1.0 - alpha) * norm(grads, grad_pool)
    for a, s in zip(assessments, fused):
        a.fused = float(s)
    return fused


def softmax_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Max-shifted temperature softmax; exact unit sum is restored at the end."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValidationError("cannot weight an empty selection")
    if not temperature > 0:
        raise ValidationError(f"temperature {temperature} must be positive")
    z = (s - s.max()) / temperature
    e = np.exp(z)
    w = e / e.sum()
    return w / w.sum()


def select_heads(
    assessments: list[HeadAssessment],
    entropy_params: EntropyParams = EntropyParams(),
    fusion: FusionParams = FusionParams(),
) -> tuple[list[HeadAssessment], bool]:
    """Filter by entropy, fuse, and keep the top-k by fused score.

    Ranking breaks ties by ascending (layer, head).  If no head survives
    the entropy filter, every assessed head is re-ranked purely by its
    normalized gradient score and the fallback is flagged.
    """
    if not assessments:
        raise ValidationError("expert set is disjoint from the record's heads")
    survivors = [a for a in assessments if a.entropy < entropy_params.threshold]
    fallback = not survivors
    if fallback:
        log.warning(
            "no head passed the entropy filter (threshold %.3g); "
            "falling back to gradient-only ranking over %d heads",
            entropy_params.threshold,
            len(assessments),
        )
        grads = np.array([a.grad_score for a in assessments])
        fused = _minmax(grads)
        for a, s in zip(assessments, fused):
            a.fused = float(s)
        pool = assessments
    else:
        scope = assessments if fusion.norm_scope == "experts" else survivors
        fuse_scores(survivors, fusion.alpha, scope=scope)
        pool = survivors
    ranked = sorted(pool, key=lambda a: (-a.fused, a.head.layer, a.head.head))
    return ranked[: fusion.top_k], fallback


def aggregate_map(maps: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Weighted sum of per-head grids via a single tensordot."""
    if len(maps) != len(weights) or not maps:
        raise ValidationError("need matching, non-empty maps and weights")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    return np.tensordot(np.asarray(weights, dtype=np.float64), stack, axes=1)


def run_pipeline(
    expert_heads,
    record: InferenceRecord,
    params: GuidanceParams = GuidanceParams(),
) -> GuidanceResult:
    """Full stage-two pass from an expert set to a crop box.

    Errors raised inside are wrapped in :class:`PipelineError` labeled with
    the stage that failed, so operators can tell a data problem from a
    degenerate result.
    """
    params = params.validated()
    heads = [h for h in expert_heads if h in record.attn]
    with _stage("selection"):
        if not heads:
            raise ValidationError(
                "none of the expert heads appear in the inference record"
            )
    with _stage("assess"):
        assessments = assess_heads(record, heads, params)
    with _stage("selection"):
        selected, fallback = select_heads(assessments, params.entropy, params.fusion)
    with _stage("weights"):
        weights = softmax_weights(
            np.array([a.fused for a in selected]), params.fusion.temperature
        )
        for a, w in zip(selected, weights):
            a.weight = float(w)
    with _stage("aggregate"):
        grids = [reshape_attention(record.attn[a.head], record.grid_side) for a in selected]
        guidance_map = aggregate_map(grids, weights)
    with _stage("bbox"):
        box = patch_bbox(guidance_map, params.box, connectivity=params.connectivity)
        geometry = ImageGeometry(
            image_w=record.image_w,
            image_h=record.image_h,
            patch_size=record.patch_size,
        )
        crop = to_pixel_box(box, geometry)
    return GuidanceResult(
        selected=selected,
        guidance_map=guidance_map,
        patch_box=box,
        crop=crop,
        fallback_used=fallback,
        grad_available=record.grad is not None,
    )
