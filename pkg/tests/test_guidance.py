"""Stage-two behavior: entropy, gradients, fusion, selection, aggregation."""

import math

import numpy as np
import pytest

from havc.errors import PipelineError, ValidationError
from havc.guidance import (
    EntropyParams,
    FusionParams,
    GuidanceParams,
    HeadAssessment,
    aggregate_map,
    assess_heads,
    entropy_from_stats,
    fuse_scores,
    gradient_score,
    reshape_attention,
    run_pipeline,
    select_heads,
    softmax_weights,
    spatial_entropy,
)
from havc.oracles import (
    aggregate_loop,
    gradient_score_loop,
    log_prob_central_diff,
    softmax_highprec,
    two_pass_fusion,
)
from havc.synth import ScenarioSpec, gen_inference_record, make_surrogate
from havc.tensor_store import HeadId


def blob_grid(n, centers, sigma=1.2, amps=None):
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    grid = np.zeros((n, n))
    amps = amps or [1.0] * len(centers)
    for (r, c), a in zip(centers, amps):
        grid += a * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma**2))
    return grid


def test_reshape_attention_row_major():
    vec = np.arange(9, dtype=float)
    grid = reshape_attention(vec, 3)
    assert grid[1, 2] == 5


def test_reshape_attention_wrong_length():
    with pytest.raises(ValidationError):
        reshape_attention(np.ones(10), 3)


def test_single_blob_entropy_is_zero():
    grid = blob_grid(16, [(8, 8)])
    assert spatial_entropy(grid) == 0.0


def test_entropy_increases_with_components():
    one = spatial_entropy(blob_grid(20, [(5, 5)]))
    two = spatial_entropy(blob_grid(20, [(4, 4), (15, 15)]))
    three = spatial_entropy(blob_grid(20, [(3, 3), (3, 16), (16, 9)]))
    assert one < two <= 1.0
    assert one < three <= 1.0


def test_entropy_from_stats_hand_values():
    params = EntropyParams(component_weight=0.25, dispersion_weight=0.75)
    d_max = math.hypot(10, 10)
    # single component, no spread
    assert entropy_from_stats(1, 0.0, 10, params) == 0.0
    # two components four cells apart
    expected = 0.25 * 1 + 0.75 * (4.0 / d_max)
    assert entropy_from_stats(2, 4.0, 10, params) == pytest.approx(expected, abs=1e-12)


def test_entropy_clamps_at_one():
    params = EntropyParams()
    raw = params.component_weight * 7 + params.dispersion_weight * 0.9
    assert raw > 1.0
    d_max = math.hypot(12, 12)
    assert entropy_from_stats(8, 0.9 * d_max, 12, params) == 1.0


def test_entropy_equals_min_of_raw_and_one():
    rng = np.random.default_rng(31)
    params = EntropyParams()
    for _ in range(50):
        count = int(rng.integers(1, 7))
        side = int(rng.integers(6, 30))
        spread = float(rng.uniform(0, side))
        raw = params.component_weight * (count - 1) + params.dispersion_weight * (
            spread / math.hypot(side, side)
        )
        assert entropy_from_stats(count, spread, side, params) == pytest.approx(
            min(raw, 1.0), abs=1e-12
        )


def test_constant_grid_entropy_is_one():
    assert spatial_entropy(np.full((8, 8), 0.4)) == 1.0


def test_gradient_score_clips_negative_sensitivity():
    attn = np.array([0.5, 0.3, 0.2])
    sens = np.array([1.0, -5.0, 2.0])
    assert gradient_score(attn, sens) == pytest.approx(0.5 * 1.0 + 0.2 * 2.0)


def test_gradient_score_matches_loop_oracle():
    rng = np.random.default_rng(32)
    for _ in range(100):
        attn = rng.random(30)
        sens = rng.standard_normal(30)
        assert gradient_score(attn, sens) == pytest.approx(
            gradient_score_loop(attn, sens), abs=1e-9
        )


def test_surrogate_sensitivity_matches_finite_differences():
    spec = ScenarioSpec(seed=17, n_entropy_decoys=1, n_gradient_decoys=1)
    record = gen_inference_record(spec)
    surrogate = make_surrogate(spec)
    rng = np.random.default_rng(33)
    attn = {h: np.asarray(record.attn[h], dtype=np.float64) for h in record.attn}
    for _ in range(25):
        head = record.attn.heads[int(rng.integers(len(record.attn)))]
        pos = int(rng.integers(record.n_visual))
        fd = log_prob_central_diff(surrogate.log_prob, attn, head, pos, step=1e-5)
        closed = surrogate.sensitivities(record.attn)[head][pos]
        if fd == closed:
            continue
        assert abs(fd - closed) / max(abs(fd), abs(closed)) < 1e-6


def test_fusion_matches_two_pass_oracle():
    rng = np.random.default_rng(34)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        assessments = [
            HeadAssessment(HeadId(0, i), float(rng.uniform(0, 1)), float(rng.uniform(0, 3)))
            for i in range(n)
        ]
        alpha = float(rng.uniform(0, 1))
        fused = fuse_scores(assessments, alpha)
        expected = two_pass_fusion(
            [a.entropy for a in assessments], [a.grad_score for a in assessments], alpha
        )
        np.testing.assert_allclose(fused, expected, atol=1e-12)


def test_fusion_constant_channel_is_zero():
    assessments = [
        HeadAssessment(HeadId(0, i), 0.2, float(g)) for i, g in enumerate([1.0, 2.0, 3.0])
    ]
    fused = fuse_scores(assessments, 0.4)
    # entropy channel constant: only the gradient channel contributes
    np.testing.assert_allclose(fused, 0.6 * np.array([0.0, 0.5, 1.0]))


def test_selection_invariant_to_gradient_rescaling():
    rng = np.random.default_rng(35)
    fusion = FusionParams(top_k=3)
    for _ in range(100):
        n = int(rng.integers(4, 10))
        base = [
            HeadAssessment(HeadId(0, i), float(rng.uniform(0, 0.29)), float(rng.uniform(0, 2)))
            for i in range(n)
        ]
        scale = float(rng.uniform(0.01, 100.0))
        scaled = [
            HeadAssessment(a.head, a.entropy, a.grad_score * scale) for a in base
        ]
        sel_a, _ = select_heads([HeadAssessment(a.head, a.entropy, a.grad_score) for a in base], fusion=fusion)
        sel_b, _ = select_heads(scaled, fusion=fusion)
        assert [a.head for a in sel_a] == [a.head for a in sel_b]


def test_selection_filters_then_ranks():
    assessments = [
        HeadAssessment(HeadId(0, 0), 0.05, 1.0),
        HeadAssessment(HeadId(0, 1), 0.95, 9.0),  # filtered by entropy
        HeadAssessment(HeadId(0, 2), 0.10, 0.5),
        HeadAssessment(HeadId(0, 3), 0.20, 3.0),
    ]
    selected, fallback = select_heads(assessments, fusion=FusionParams(top_k=2))
    assert not fallback
    # survivors: heads 0, 2, 3; head 3 wins on gradient, head 0 on focus
    assert [a.head for a in selected] == [HeadId(0, 3), HeadId(0, 0)]


def test_selection_tie_breaks_by_head_order():
    assessments = [
        HeadAssessment(HeadId(1, 1), 0.1, 1.0),
        HeadAssessment(HeadId(0, 2), 0.1, 1.0),
        HeadAssessment(HeadId(0, 1), 0.1, 1.0),
    ]
    selected, _ = select_heads(assessments, fusion=FusionParams(top_k=2))
    assert [a.head for a in selected] == [HeadId(0, 1), HeadId(0, 2)]


def test_entropy_threshold_is_strict():
    at_threshold = [HeadAssessment(HeadId(0, 0), 0.3, 1.0)]
    selected, fallback = select_heads(at_threshold, EntropyParams(threshold=0.3))
    assert fallback  # 0.3 is not < 0.3


def test_fallback_ranks_by_gradient(caplog):
    assessments = [
        HeadAssessment(HeadId(0, 0), 0.9, 0.5),
        HeadAssessment(HeadId(0, 1), 0.8, 2.0),
        HeadAssessment(HeadId(0, 2), 0.7, 1.0),
    ]
    with caplog.at_level("WARNING"):
        selected, fallback = select_heads(assessments, fusion=FusionParams(top_k=2))
    assert fallback
    assert "entropy filter" in caplog.text
    assert [a.head for a in selected] == [HeadId(0, 1), HeadId(0, 2)]


def test_empty_assessments_rejected():
    with pytest.raises(ValidationError):
        select_heads([])


def test_softmax_sums_to_one_and_matches_highprec():
    rng = np.random.default_rng(36)
    for _ in range(60):
        n = int(rng.integers(1, 10))
        scores = rng.uniform(0, 1, size=n)
        tau = float(rng.choice([0.05, 0.1, 0.5, 2.0]))
        w = softmax_weights(scores, tau)
        assert abs(w.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(w, softmax_highprec(scores, tau), atol=1e-12)


def test_softmax_is_order_isomorphic():
    rng = np.random.default_rng(37)
    for _ in range(40):
        scores = rng.standard_normal(8)
        w = softmax_weights(scores, 0.1)
        assert np.array_equal(np.argsort(scores, kind="stable"), np.argsort(w, kind="stable"))


def test_softmax_handles_extreme_scores_without_overflow():
    w = softmax_weights(np.array([1000.0, 0.0, -1000.0]), 0.001)
    assert np.isfinite(w).all()
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[0] == pytest.approx(1.0)


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(38)
    maps = [rng.random((6, 6)) for _ in range(4)]
    weights = softmax_weights(rng.random(4), 0.5)
    np.testing.assert_allclose(
        aggregate_map(maps, weights), aggregate_loop(maps, weights), atol=1e-12
    )


def test_aggregate_of_identical_maps_is_identity():
    grid = np.random.default_rng(39).random((5, 5))
    merged = aggregate_map([grid, grid, grid], np.array([0.2, 0.3, 0.5]))
    np.testing.assert_allclose(merged, grid, atol=1e-12)


# ---------------------------------------------------------------------------
# full pipeline


def test_pipeline_selects_planted_head():
    spec = ScenarioSpec(seed=4)
    record = gen_inference_record(spec)
    result = run_pipeline(spec.all_heads, record, GuidanceParams())
    assert [a.head for a in result.selected] == list(spec.planted_heads)
    assert result.selected[0].weight == pytest.approx(1.0)
    assert not result.fallback_used
    assert result.grad_available


def test_pipeline_without_gradients_uses_zero_grad_channel():
    spec = ScenarioSpec(seed=4)
    record = gen_inference_record(spec, with_grad=False)
    result = run_pipeline(spec.all_heads, record, GuidanceParams())
    assert not result.grad_available
    assert all(a.grad_score == 0.0 for a in result.selected)
    assert [a.head for a in result.selected] == list(spec.planted_heads)


def test_pipeline_guidance_map_is_weighted_sum():
    spec = ScenarioSpec(seed=8, n_entropy_decoys=1)
    record = gen_inference_record(spec)
    result = run_pipeline(spec.all_heads, record, GuidanceParams())
    expected = np.zeros((record.grid_side, record.grid_side))
    for a in result.selected:
        expected += a.weight * reshape_attention(record.attn[a.head], record.grid_side)
    np.testing.assert_allclose(result.guidance_map, expected, atol=1e-12)


def test_pipeline_disjoint_expert_set_fails_in_selection():
    spec = ScenarioSpec(seed=4)
    record = gen_inference_record(spec)
    with pytest.raises(PipelineError) as exc_info:
        run_pipeline([HeadId(99, 99)], record, GuidanceParams())
    assert exc_info.value.stage == "selection"


def test_pipeline_rejects_bad_params():
    spec = ScenarioSpec(seed=4)
    record = gen_inference_record(spec)
    with pytest.raises(ValidationError):
        run_pipeline(spec.all_heads, record, GuidanceParams(fusion=FusionParams(alpha=2.0)))


def test_assess_heads_reports_all_requested():
    spec = ScenarioSpec(seed=5, n_entropy_decoys=2)
    record = gen_inference_record(spec)
    heads = list(spec.all_heads)
    assessments = assess_heads(record, heads)
    assert [a.head for a in assessments] == heads
    assert all(0.0 <= a.entropy <= 1.0 for a in assessments)
    assert all(a.grad_score >= 0.0 for a in assessments)
