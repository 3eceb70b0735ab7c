"""Grid-level kernels: normalization, thresholding, components, boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import pdist

from .errors import NoSalientRegionError, ValidationError

_STRUCTURE_8 = np.ones((3, 3), dtype=bool)
_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class ComponentSet:
    """Connected components of a binary grid.

    Labels run 1..count in row-major order of first encounter; background
    is 0.  ``centroids[i]`` and ``areas[i]`` describe label ``i + 1``.
    """

    count: int
    labels: np.ndarray
    centroids: np.ndarray
    areas: np.ndarray


@dataclass(frozen=True)
class ImageGeometry:
    """Pixel-space context for mapping patch boxes onto an image."""

    image_w: int
    image_h: int
    patch_size: int


@dataclass(frozen=True)
class BoxParams:
    """Box extraction knobs: threshold as a fraction of the map maximum,
    padding in patches, and the minimum box side in patches."""

    threshold: float = 0.5
    pad: int = 1
    min_side: int = 2


@dataclass(frozen=True)
class CropBox:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(f"degenerate crop box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


def _as_grid(values: np.ndarray, name: str = "map") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError(f"{name} must be a non-empty 2-D grid")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def normalize01(values: np.ndarray) -> np.ndarray:
    """Min-max rescale onto [0, 1]; a constant input maps to all zeros."""
    arr = _as_grid(values)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> tuple[float, np.ndarray]:
    """Between-class-variance threshold over a histogram of [0, 1] values.

    Returns the chosen boundary ``t`` and the strict foreground mask
    ``values > t``.  Candidate boundaries are the interior bin edges
    ``k / bins``; ties resolve to the lowest boundary.  A constant input
    yields an empty foreground.
    """
    arr = _as_grid(values)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("threshold input must lie in [0, 1]")
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    counts, _ = np.histogram(arr, bins=bins, range=(0.0, 1.0))
    p = counts / counts.sum()
    idx = np.arange(bins, dtype=np.float64)
    omega = np.cumsum(p)
    mu = np.cumsum(p * idx)
    mu_total = mu[-1]
    w0 = omega[:-1]
    w1 = 1.0 - w0
    between = np.zeros(bins - 1, dtype=np.float64)
    ok = (w0 > 0) & (w1 > 0)
    if not ok.any():
        # Every value sits in one bin: nothing separates, foreground empty.
        return 1.0, np.zeros(arr.shape, dtype=bool)
    between[ok] = (mu_total * w0[ok] - mu[:-1][ok]) ** 2 / (w0[ok] * w1[ok])
    k = int(np.argmax(between))
    t = (k + 1) / bins
    return t, arr > t


def connected_components(mask: np.ndarray, connectivity: int = 8) -> ComponentSet:
    """Label a binary grid and summarize each component.

    Uses 8- or 4-neighbourhoods; labels are renumbered so that label order
    follows the row-major scan order of each component's first cell.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValidationError("mask must be a non-empty 2-D grid")
    if connectivity == 8:
        structure = _STRUCTURE_8
    elif connectivity == 4:
        structure = _STRUCTURE_4
    else:
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    raw, count = ndimage.label(mask != 0, structure=structure)
    if count == 0:
        return ComponentSet(
            count=0,
            labels=np.zeros(mask.shape, dtype=np.int32),
            centroids=np.zeros((0, 2), dtype=np.float64),
            areas=np.zeros(0, dtype=np.int64),
        )
    flat = raw.ravel()
    present, first = np.unique(flat, return_index=True)
    nonzero = present != 0
    order = present[nonzero][np.argsort(first[nonzero], kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1, dtype=np.int32)
    labels = remap[raw]

    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    areas = np.bincount(lab, minlength=count + 1)[1:].astype(np.int64)
    sum_r = np.bincount(lab, weights=rows, minlength=count + 1)[1:]
    sum_c = np.bincount(lab, weights=cols, minlength=count + 1)[1:]
    centroids = np.stack([sum_r / areas, sum_c / areas], axis=1)
    return ComponentSet(count=int(count), labels=labels, centroids=centroids, areas=areas)


def mean_pairwise_distance(centroids: np.ndarray) -> float:
    """Mean Euclidean distance over unordered centroid pairs; 0 if < 2."""
    pts = np.asarray(centroids, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        return 0.0
    return float(pdist(pts).mean())


def _fit_span(lo: int, hi: int, min_size: int, limit: int) -> tuple[int, int]:
    """Clamp [lo, hi) into [0, limit), growing to min_size symmetrically.

    Growth that runs past an edge is transferred to the other side, so the
    span keeps its size whenever the grid allows it.
    """
    deficit = min_size - (hi - lo)
    if deficit > 0:
        lo -= deficit // 2
        hi += deficit - deficit // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > limit:
        lo -= hi - limit
        hi = limit
    lo = max(lo, 0)
    return lo, hi


def patch_bbox(
    values: np.ndarray, params: BoxParams = BoxParams(), *, connectivity: int = 8
) -> tuple[int, int, int, int]:
    """Bounding box, in patch coordinates, of the dominant salient region.

    Cells at or above ``threshold`` times the map maximum form the salient
    mask; the largest connected component (ties: first encountered) is
    boxed, padded, grown to ``min_side``, and clamped to the grid.  Returns
    a half-open ``(r0, c0, r1, c1)``.
    """
    arr = _as_grid(values)
    if arr.min() < 0:
        raise ValidationError("saliency map must be non-negative")
    if not (0.0 < params.threshold <= 1.0):
        raise ValidationError(f"box threshold {params.threshold} outside (0, 1]")
    if params.pad < 0 or params.min_side < 1:
        raise ValidationError("box pad must be >= 0 and min side >= 1")
    peak = arr.max()
    if peak <= 0.0:
        raise NoSalientRegionError("saliency map is identically zero")
    mask = arr >= params.threshold * peak
    comps = connected_components(mask, connectivity=connectivity)
    best = int(np.argmax(comps.areas))
    rows, cols = np.nonzero(comps.labels == best + 1)
    r0, r1 = int(rows.min()) - params.pad, int(rows.max()) + 1 + params.pad
    c0, c1 = int(cols.min()) - params.pad, int(cols.max()) + 1 + params.pad
    h, w = arr.shape
    r0, r1 = _fit_span(r0, r1, min(params.min_side, h), h)
    c0, c1 = _fit_span(c0, c1, min(params.min_side, w), w)
    return r0, c0, r1, c1


def to_pixel_box(patch_box: tuple[int, int, int, int], geometry: ImageGeometry) -> CropBox:
    """Scale a half-open patch box to pixels and clamp to the image."""
    r0, c0, r1, c1 = patch_box
    ps = geometry.patch_size
    x0 = max(0, c0 * ps)
    y0 = max(0, r0 * ps)
    x1 = min(geometry.image_w, c1 * ps)
    y1 = min(geometry.image_h, r1 * ps)
    x0 = min(x0, geometry.image_w - 1)
    y0 = min(y0, geometry.image_h - 1)
    return CropBox(x0=x0, y0=y0, x1=max(x1, x0 + 1), y1=max(y1, y0 + 1))


def extract_bbox(
    values: np.ndarray,
    geometry: ImageGeometry,
    params: BoxParams = BoxParams(),
    *,
    connectivity: int = 8,
) -> CropBox:
    """Pixel-space crop box for the dominant region of a saliency map."""
    return to_pixel_box(patch_bbox(values, params, connectivity=connectivity), geometry)
