"""Localization benchmarks over synthetic scenarios.

Ground truth is the planted region of each scenario, so cropping quality
reduces to box IoU.  The module provides single-run evaluation, a ladder
of ablation variants, and a parameter sweep that reuses per-head
assessments across every parameter combination.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import HavcError, NoSalientRegionError, ValidationError
from .guidance import (
    FusionParams,
    GuidanceParams,
    aggregate_map,
    assess_heads,
    reshape_attention,
    run_pipeline,
    select_heads,
    softmax_weights,
)
from .spatial import BoxParams, CropBox, ImageGeometry, extract_bbox
from .synth import ScenarioSpec, gen_inference_record
from .tensor_store import HeadId, InferenceRecord

ABLATION_VARIANTS = (
    "no_crop",
    "random_crop",
    "all_heads",
    "entropy_only",
    "gradient_only",
    "full",
)


def box_iou(a: CropBox, b: CropBox) -> float:
    """Intersection over union of two half-open pixel boxes."""
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def truth_box(spec: ScenarioSpec) -> CropBox:
    """Pixel-space box of the scenario's planted region."""
    r0, c0, r1, c1 = spec.planted_region
    ps = spec.patch_size
    return CropBox(x0=c0 * ps, y0=r0 * ps, x1=c1 * ps, y1=r1 * ps)


def make_localization_scenario(seed: int, **overrides) -> ScenarioSpec:
    """One planted head among fifteen noise heads, region placed per seed."""
    rng = np.random.default_rng([seed, 2])
    side = 24
    r0 = int(rng.integers(2, side - 8))
    c0 = int(rng.integers(2, side - 8))
    flat = int(rng.integers(16))
    spec = ScenarioSpec(
        grid_side=side,
        n_layers=4,
        n_heads=4,
        planted_heads=(HeadId(flat // 4, flat % 4),),
        planted_region=(r0, c0, r0 + 6, c0 + 6),
        seed=seed,
    )
    return replace(spec, **overrides) if overrides else spec


def make_sweep_scenario(seed: int) -> ScenarioSpec:
    """Localization scenario plus decoys that punish one-channel fusion."""
    return make_localization_scenario(seed, n_entropy_decoys=2, n_gradient_decoys=2)


def _geometry(record: InferenceRecord) -> ImageGeometry:
    return ImageGeometry(
        image_w=record.image_w, image_h=record.image_h, patch_size=record.patch_size
    )


def run_variant(
    variant: str,
    spec: ScenarioSpec,
    record: InferenceRecord | None = None,
    params: GuidanceParams = GuidanceParams(),
) -> CropBox:
    """Crop box produced by one ablation variant on one scenario."""
    if record is None:
        record = gen_inference_record(spec)
    geometry = _geometry(record)
    if variant == "no_crop":
        return CropBox(0, 0, geometry.image_w, geometry.image_h)
    if variant == "random_crop":
        rng = np.random.default_rng([spec.seed, 3])
        w, h = geometry.image_w // 2, geometry.image_h // 2
        x0 = int(rng.integers(0, geometry.image_w - w + 1))
        y0 = int(rng.integers(0, geometry.image_h - h + 1))
        return CropBox(x0, y0, x0 + w, y0 + h)
    if variant == "all_heads":
        grids = [
            reshape_attention(record.attn[h], record.grid_side) for h in record.attn
        ]
        weights = np.full(len(grids), 1.0 / len(grids))
        merged = aggregate_map(grids, weights)
        return extract_bbox(
            merged, geometry, params.box, connectivity=params.connectivity
        )
    if variant == "entropy_only":
        params = replace(params, fusion=replace(params.fusion, alpha=1.0))
    elif variant == "gradient_only":
        params = replace(params, fusion=replace(params.fusion, alpha=0.0))
    elif variant != "full":
        raise ValidationError(f"unknown ablation variant {variant!r}")
    return run_pipeline(spec.all_heads, record, params).crop


def ablation_table(
    seeds: range | list[int],
    params: GuidanceParams = GuidanceParams(),
    *,
    scenario=make_localization_scenario,
) -> dict[str, float]:
    """Mean IoU per ablation variant over a set of seeded scenarios.

    A variant that degenerates on some seed (no salient region) scores
    zero IoU for that seed rather than aborting the table.
    """
    totals = {v: 0.0 for v in ABLATION_VARIANTS}
    seeds = list(seeds)
    for seed in seeds:
        spec = scenario(seed)
        record = gen_inference_record(spec)
        truth = truth_box(spec)
        for variant in ABLATION_VARIANTS:
            try:
                box = run_variant(variant, spec, record, params)
            except (NoSalientRegionError, HavcError):
                continue
            totals[variant] += box_iou(box, truth)
    return {v: totals[v] / len(seeds) for v in ABLATION_VARIANTS}


def sweep_guidance(
    seeds: range | list[int],
    alphas: list[float],
    top_ks: list[int],
    params: GuidanceParams = GuidanceParams(),
    *,
    scenario=make_sweep_scenario,
) -> dict:
    """Mean-IoU table over an alpha x top-k grid.

    Per-head entropy and gradient assessments are computed once per seed
    and reused for every parameter combination; only fusion, selection,
    weighting, and box extraction rerun.
    """
    if not alphas or not top_ks:
        raise ValidationError("sweep needs at least one alpha and one top_k")
    seeds = list(seeds)
    if not seeds:
        raise ValidationError("sweep needs at least one seed")
    table = np.zeros((len(alphas), len(top_ks)), dtype=np.float64)
    for seed in seeds:
        spec = scenario(seed)
        record = gen_inference_record(spec)
        truth = truth_box(spec)
        geometry = _geometry(record)
        heads = [h for h in spec.all_heads if h in record.attn]
        assessments = assess_heads(record, heads, params)
        grids = {
            h: reshape_attention(record.attn[h], record.grid_side) for h in heads
        }
        for i, alpha in enumerate(alphas):
            for j, k in enumerate(top_ks):
                fusion = replace(params.fusion, alpha=alpha, top_k=k)
                selected, _ = select_heads(assessments, params.entropy, fusion)
                weights = softmax_weights(
                    np.array([a.fused for a in selected]), fusion.temperature
                )
                merged = aggregate_map([grids[a.head] for a in selected], weights)
                try:
                    box = extract_bbox(
                        merged, geometry, params.box, connectivity=params.connectivity
                    )
                except NoSalientRegionError:
                    continue
                table[i, j] += box_iou(box, truth)
    table /= len(seeds)

    best = float(table.max())
    hits = np.argwhere(table >= best - 1e-12)
    alpha_interior = bool(
        np.all((hits[:, 0] > 0) & (hits[:, 0] < len(alphas) - 1))
    ) and len(alphas) > 2
    k_interior = bool(
        np.all((hits[:, 1] > 0) & (hits[:, 1] < len(top_ks) - 1))
    ) and len(top_ks) > 2
    bi, bj = map(int, hits[0])
    return {
        "schema": "havc-sweep-report/1",
        "alphas": [float(a) for a in alphas],
        "top_k": [int(k) for k in top_ks],
        "n_seeds": len(seeds),
        "mean_iou": [[float(v) for v in row] for row in table],
        "best": {
            "alpha": float(alphas[bi]),
            "top_k": int(top_ks[bj]),
            "mean_iou": best,
        },
        "interior": {"alpha": alpha_interior, "top_k": k_interior},
    }
