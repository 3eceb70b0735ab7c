"""Minimal binary PGM/PPM image I/O and guidance-map rendering.

Only the raw variants (P5 grayscale, P6 color) with maxval 255 are
supported; that is enough to feed crops in and visualizations out without
pulling in an image codec dependency.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError
from .spatial import CropBox, normalize01


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse whitespace/comment-separated header integers after the magic."""
    tokens: list[int] = []
    i = 2
    while len(tokens) < count:
        if i >= len(data):
            raise ValidationError("pixmap header ended early")
        ch = data[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isdigit():
            j = i
            while j < len(data) and data[j : j + 1].isdigit():
                j += 1
            tokens.append(int(data[i:j]))
            i = j
        else:
            raise ValidationError(f"unexpected byte {ch!r} in pixmap header")
    # Exactly one whitespace byte separates the header from the raster.
    if i >= len(data) or not data[i : i + 1].isspace():
        raise ValidationError("pixmap header not terminated by whitespace")
    return tokens, i + 1


def read_pixmap(path: str | Path) -> np.ndarray:
    """Load a binary pixmap as uint8, shape (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise ValidationError(f"{path}: not a pixmap file")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValidationError(
            f"{path}: unsupported pixmap magic {magic!r}, expected P5 or P6"
        )
    (width, height, maxval), start = _read_header_tokens(data, 3)
    if width < 1 or height < 1:
        raise ValidationError(f"{path}: bad pixmap size {width}x{height}")
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = data[start : start + need]
    if len(raster) != need:
        raise ValidationError(
            f"{path}: raster has {len(raster)} bytes, expected {need}"
        )
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def write_pixmap(path: str | Path, image: np.ndarray) -> None:
    """Write a uint8 array as P5 (2-D) or P6 (3-D with 3 channels)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValidationError(f"pixmap data must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"pixmap data must be (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise ValidationError("pixmap must be non-empty")
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + arr.tobytes())


def crop_image(image: np.ndarray, box: CropBox) -> np.ndarray:
    """Cut a crop box out of an image array, validating bounds."""
    h, w = image.shape[:2]
    if not (0 <= box.x0 < box.x1 <= w and 0 <= box.y0 < box.y1 <= h):
        raise ValidationError(
            f"crop box {box} does not fit image of size {w}x{h}"
        )
    return image[box.y0 : box.y1, box.x0 : box.x1].copy()


def render_map(values: np.ndarray, scale: int = 1) -> np.ndarray:
    """Min-max render of a grid to grayscale, optionally block-upscaled."""
    if scale < 1:
        raise ValidationError(f"scale {scale} must be >= 1")
    norm = normalize01(np.asarray(values, dtype=np.float64))
    gray = np.round(norm * 255.0).astype(np.uint8)
    if scale > 1:
        gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
    return gray
