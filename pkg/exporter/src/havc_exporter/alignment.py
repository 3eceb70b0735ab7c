"""Ground-truth region to visual-token mapping.

A pixel box marks every visual token whose patch it overlaps by at least
half the patch area.  The mapping is pure arithmetic over the patch grid,
so for a fixed geometry and ground truth it is deterministic.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import AlignmentError, GeometryError

Box = tuple[int, int, int, int]

MIN_OVERLAP = 0.5


def overlap_fraction(box: Box, row: int, col: int, patch_size: int) -> float:
    """Fraction of patch (row, col) covered by a half-open pixel box."""
    x0, y0, x1, y1 = box
    px0 = col * patch_size
    py0 = row * patch_size
    w = min(x1, px0 + patch_size) - max(x0, px0)
    h = min(y1, py0 + patch_size) - max(y0, py0)
    if w <= 0 or h <= 0:
        return 0.0
    return (w * h) / float(patch_size * patch_size)


def region_patches(
    box: Box, grid_side: int, patch_size: int, *, min_overlap: float = MIN_OVERLAP
) -> np.ndarray:
    """Row-major flat indices of patches the box covers by >= min_overlap."""
    x0, y0, x1, y1 = (int(v) for v in box)
    side = grid_side * patch_size
    if not (0 <= x0 < x1 <= side and 0 <= y0 < y1 <= side):
        raise GeometryError(
            f"box {(x0, y0, x1, y1)} does not fit the {side}x{side} pixel canvas"
        )
    hits = []
    # Only patches intersecting the box's row/column band can qualify.
    for row in range(y0 // patch_size, min(grid_side, -(-y1 // patch_size))):
        for col in range(x0 // patch_size, min(grid_side, -(-x1 // patch_size))):
            frac = overlap_fraction((x0, y0, x1, y1), row, col, patch_size)
            if frac >= min_overlap:
                hits.append(row * grid_side + col)
    return np.asarray(hits, dtype=np.int64)


def region_token_indices(
    box: Box, grid_side: int, patch_size: int, visual_indices: Sequence[int]
) -> np.ndarray:
    """Sequence positions of the visual tokens a ground-truth box marks.

    Raises :class:`AlignmentError` when no patch clears the overlap bar;
    callers treat that as a skippable alignment failure, not a fatal one.
    """
    visual = np.asarray(visual_indices, dtype=np.int64)
    if visual.size != grid_side * grid_side:
        raise GeometryError(
            f"{visual.size} visual tokens for a {grid_side}x{grid_side} patch grid"
        )
    patches = region_patches(box, grid_side, patch_size)
    if patches.size == 0:
        raise AlignmentError(
            f"box {tuple(int(v) for v in box)} covers no patch by >= {MIN_OVERLAP:.0%}"
        )
    return visual[patches]
