"""Slow reference implementations used to cross-check the fast paths.

Everything here is written as plain loops over Python scalars, on purpose:
these functions share no code with the production implementations they
check.  They are exported as a bundle so test suites and external callers
can reach every reference route from one place.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import mpmath
import numpy as np

from .tensor_store import HeadId, SequenceLayout


def argmax_scan(row: Sequence[float], valid_indices: Sequence[int]) -> int:
    """First-maximum scan over the valid positions of one attention row."""
    best_idx = -1
    best_val = -math.inf
    for idx in valid_indices:
        v = float(row[idx])
        if v > best_val:
            best_val = v
            best_idx = int(idx)
    return best_idx


def peak_vector_score(
    row: Sequence[float], mask: Sequence[int], layout: SequenceLayout
) -> float:
    """Score one row by materializing its one-hot peak vector.

    Builds the full indicator vector of the peak position and takes its
    inner product with the mask, divided by the mask's L1 norm.
    """
    peak = argmax_scan(row, layout.valid_indices)
    one_hot = [0.0] * layout.total_len
    one_hot[peak] = 1.0
    inner = 0.0
    norm = 0.0
    for j in range(layout.total_len):
        inner += one_hot[j] * float(mask[j])
        norm += abs(float(mask[j]))
    return inner / norm


def otsu_scan(values: np.ndarray, bins: int = 256) -> float:
    """Exhaustive scan over histogram bin boundaries.

    For every interior boundary, class probabilities and means are computed
    from scratch and the between-class variance evaluated.  Ties keep the
    lowest boundary.
    """
    flat = [float(v) for v in np.asarray(values).ravel()]
    counts = [0] * bins
    for v in flat:
        b = int(v * bins)
        if b >= bins:
            b = bins - 1
        counts[b] += 1
    total = len(flat)
    best_k = None
    best_var = -1.0
    for k in range(bins - 1):
        n0 = 0
        s0 = 0.0
        for j in range(k + 1):
            n0 += counts[j]
            s0 += j * counts[j]
        n1 = total - n0
        s1 = sum(j * counts[j] for j in range(bins)) - s0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = s0 / n0
        mu1 = s1 / n1
        var = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_k = k
    if best_k is None:
        # One populated bin: no boundary separates two classes.
        return 1.0
    return (best_k + 1) / bins


def flood_fill_components(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Label connected components by breadth-first flood fill.

    Labels are assigned in row-major order of first encounter, starting
    at 1; background stays 0.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 8:
        steps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    elif connectivity == 4:
        steps = [(-1, 0), (0, -1), (0, 1), (1, 0)]
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    next_label = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c] != 0:
                continue
            next_label += 1
            queue = deque([(r, c)])
            labels[r, c] = next_label
            while queue:
                cr, cc = queue.popleft()
                for dr, dc in steps:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w:
                        if mask[nr, nc] and labels[nr, nc] == 0:
                            labels[nr, nc] = next_label
                            queue.append((nr, nc))
    return labels


def pairwise_mean_distance(centroids: Sequence[Sequence[float]]) -> float:
    """Mean Euclidean distance over all unordered centroid pairs."""
    n = len(centroids)
    if n < 2:
        return 0.0
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            dr = float(centroids[i][0]) - float(centroids[j][0])
            dc = float(centroids[i][1]) - float(centroids[j][1])
            total += math.hypot(dr, dc)
            count += 1
    return total / count


def two_pass_fusion(
    entropies: Sequence[float], grad_scores: Sequence[float], alpha: float
) -> list[float]:
    """Fusion reference: normalize both channels in full passes, then blend.

    A constant channel normalizes to all zeros, matching the production
    convention.
    """
    focus = [1.0 - float(e) for e in entropies]
    grads = [float(g) for g in grad_scores]

    def norm(values: list[float]) -> list[float]:
        lo = min(values)
        hi = max(values)
        if hi == lo:
            return [0.0] * len(values)
        return [(v - lo) / (hi - lo) for v in values]

    nf = norm(focus)
    ng = norm(grads)
    return [alpha * a + (1.0 - alpha) * b for a, b in zip(nf, ng)]


def softmax_highprec(scores: Sequence[float], temperature: float) -> list[float]:
    """Temperature softmax evaluated at 50 decimal digits."""
    with mpmath.workdps(50):
        exps = [mpmath.exp(mpmath.mpf(float(s)) / mpmath.mpf(temperature)) for s in scores]
        total = mpmath.fsum(exps)
        return [float(e / total) for e in exps]


def gradient_score_loop(attn: Sequence[float], sens: Sequence[float]) -> float:
    """Inner product of attention with the positive part of sensitivity."""
    total = 0.0
    for a, s in zip(attn, sens):
        total += float(a) * max(0.0, float(s))
    return total


def aggregate_loop(
    maps: Sequence[np.ndarray], weights: Sequence[float]
) -> np.ndarray:
    """Weighted-sum aggregation as an explicit per-cell accumulation."""
    h, w = np.asarray(maps[0]).shape
    out = np.zeros((h, w), dtype=np.float64)
    for m, wgt in zip(maps, weights):
        arr = np.asarray(m, dtype=np.float64)
        for r in range(h):
            for c in range(w):
                out[r, c] += float(wgt) * arr[r, c]
    return out


def log_prob_central_diff(
    log_prob_fn: Callable[[Mapping[HeadId, np.ndarray]], float],
    attn: Mapping[HeadId, np.ndarray],
    head: HeadId,
    position: int,
    step: float = 1e-5,
) -> float:
    """Central finite difference of a log-probability functional.

    Perturbs one attention entry in both directions and re-evaluates the
    functional from scratch each time.
    """
    base = {h: np.array(attn[h], dtype=np.float64) for h in attn}
    plus = dict(base)
    plus[head] = base[head].copy()
    plus[head][position] += step
    minus = dict(base)
    minus[head] = base[head].copy()
    minus[head][position] -= step
    return (log_prob_fn(plus) - log_prob_fn(minus)) / (2.0 * step)


@dataclass(frozen=True)
class OraclePack:
    """Bundle of every reference route, for one-stop access in tests."""

    argmax_scan: Callable
    peak_vector_score: Callable
    otsu_scan: Callable
    flood_fill_components: Callable
    pairwise_mean_distance: Callable
    two_pass_fusion: Callable
    softmax_highprec: Callable
    gradient_score_loop: Callable
    aggregate_loop: Callable
    log_prob_central_diff: Callable


def oracle_pack() -> OraclePack:
    return OraclePack(
        argmax_scan=argmax_scan,
        peak_vector_score=peak_vector_score,
        otsu_scan=otsu_scan,
        flood_fill_components=flood_fill_components,
        pairwise_mean_distance=pairwise_mean_distance,
        two_pass_fusion=two_pass_fusion,
        softmax_highprec=softmax_highprec,
        gradient_score_loop=gradient_score_loop,
        aggregate_loop=aggregate_loop,
        log_prob_central_diff=log_prob_central_diff,
    )
