"""Binary tensor files, JSON manifests, and the record types they carry.

Tensor files (``.hvt``) use a fixed little-endian layout::

    offset  size  field
    0       4     magic, the ASCII bytes "HAVC"
    4       4     format version, uint32 (currently 1)
    8       4     dimension count, uint32
    12      8*n   dimension sizes, uint64 each
    ...     4*k   payload, float32, row-major

Manifests (``.hvm``) are JSON documents that point at tensor files, so a
corpus on disk stays inspectable with ordinary tools.  Per-record
attention is stored stacked as one ``[n_heads, seq_len]`` tensor rather
than one file per head.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DimOverflowError,
    NonFiniteValueError,
    TrailingDataError,
    TruncatedStreamError,
    UnsupportedVersionError,
    ValidationError,
)

log = logging.getLogger("havc.tensor_store")

MAGIC = b"HAVC"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
MAX_NDIM = 32
MAX_ELEMENTS = 1 << 31

TENSOR_SUFFIX = ".hvt"
MANIFEST_SUFFIX = ".hvm"

# Attention rows must sum to 1.  Deviations inside the warn band are
# renormalized at load time; anything past the error band is rejected.
ROW_SUM_WARN = 1e-3
ROW_SUM_ERROR = 1e-2

_HEADER = struct.Struct("<4sII")
_DIM = struct.Struct("<Q")


# ---------------------------------------------------------------------------
# binary tensor I/O


def write_tensor(tensor: np.ndarray, sink: BinaryIO) -> int:
    """Serialize ``tensor`` to ``sink`` and return the byte count written.

    The array is converted to little-endian float32.  Values that are not
    finite after conversion are rejected before anything is written, so a
    failed call never leaves partial output in the sink.
    """
    # Overflow in the cast produces inf, which the finiteness check below
    # rejects; the interim warning is redundant.
    with np.errstate(over="ignore"):
        arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise DimOverflowError(
            f"tensor rank {arr.ndim} outside supported range 1..{MAX_NDIM}"
        )
    if any(d <= 0 for d in arr.shape):
        raise DimOverflowError(f"tensor has an empty dimension: {arr.shape}")
    if arr.size > MAX_ELEMENTS:
        raise DimOverflowError(
            f"tensor has {arr.size} elements, limit is {MAX_ELEMENTS}"
        )
    if not np.isfinite(arr).all():
        raise NonFiniteValueError("tensor contains NaN or infinite values")

    header = _HEADER.pack(MAGIC, FORMAT_VERSION, arr.ndim)
    dims = b"".join(_DIM.pack(d) for d in arr.shape)
    payload = arr.tobytes()
    sink.write(header)
    sink.write(dims)
    sink.write(payload)
    return len(header) + len(dims) + len(payload)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TruncatedStreamError(
            f"stream ended while reading {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Read one tensor from ``source`` and return it as float32.

    Raises a distinct error for each failure mode: bad magic, unsupported
    version, out-of-range dimensions, truncated payload, and non-finite
    values.  Bytes after the payload are left unread.
    """
    magic = _read_exact(source, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"format version {version}, this reader supports {FORMAT_VERSION}"
        )
    (ndim,) = struct.unpack("<I", _read_exact(source, 4, "dimension count"))
    if ndim < 1 or ndim > MAX_NDIM:
        raise DimOverflowError(
            f"dimension count {ndim} outside supported range 1..{MAX_NDIM}"
        )
    raw_dims = _read_exact(source, 8 * ndim, "dimension sizes")
    dims = struct.unpack(f"<{ndim}Q", raw_dims)
    if any(d == 0 for d in dims):
        raise DimOverflowError(f"tensor has an empty dimension: {dims}")
    size = 1
    for d in dims:
        size *= d
        if size > MAX_ELEMENTS:
            raise DimOverflowError(
                f"tensor has more than {MAX_ELEMENTS} elements: {dims}"
            )
    payload = _read_exact(source, 4 * size, "payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise NonFiniteValueError("tensor payload contains NaN or infinite values")
    return arr


def save_tensor(path: str | Path, tensor: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_tensor(tensor, f)


def load_tensor(path: str | Path) -> np.ndarray:
    """Load a standalone tensor file, rejecting trailing bytes."""
    with open(path, "rb") as f:
        arr = read_tensor(f)
        extra = f.read(1)
        if extra:
            raise TrailingDataError(f"{path}: unexpected bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# head identities and stacked attention tables


class HeadId(NamedTuple):
    """Identifies one attention head by (layer, head) position."""

    layer: int
    head: int

    @classmethod
    def parse(cls, text: str) -> "HeadId":
        parts = text.split(",")
        if len(parts) != 2:
            raise ValidationError(f"malformed head id {text!r}, expected 'layer,head'")
        try:
            layer, head = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(
                f"malformed head id {text!r}, expected two integers"
            ) from None
        if layer < 0 or head < 0:
            raise ValidationError(f"head id {text!r} has a negative component")
        return cls(layer, head)

    def key(self) -> str:
        return f"{self.layer},{self.head}"


class HeadTable(Mapping):
    """Read-only mapping from :class:`HeadId` to a row of one stacked array.

    Keeping the rows stacked lets bulk consumers work on the 2-D block
    directly while dict-style access stays available for everything else.
    """

    __slots__ = ("_heads", "_rows", "_index")

    def __init__(self, heads: Sequence[HeadId], rows: np.ndarray):
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise ValidationError(f"head table rows must be 2-D, got rank {rows.ndim}")
        if len(heads) != rows.shape[0]:
            raise ValidationError(
                f"head table has {len(heads)} head ids for {rows.shape[0]} rows"
            )
        if isinstance(heads, tuple) and all(type(h) is HeadId for h in heads):
            self._heads = heads
        else:
            self._heads = tuple(HeadId(int(l), int(h)) for l, h in heads)
        self._rows = rows
        # Built lazily: bulk consumers that only touch .heads/.rows never
        # need the per-head index.
        self._index: dict[HeadId, int] | None = None

    @classmethod
    def from_mapping(cls, table: Mapping) -> "HeadTable":
        if isinstance(table, cls):
            return table
        heads = [HeadId(*k) for k in table]
        if not heads:
            raise ValidationError("head table is empty")
        return cls(heads, np.stack([np.asarray(table[k]) for k in table]))

    @property
    def heads(self) -> tuple[HeadId, ...]:
        return self._heads

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    def _lookup(self) -> dict[HeadId, int]:
        if self._index is None:
            index = {h: i for i, h in enumerate(self._heads)}
            if len(index) != len(self._heads):
                raise ValidationError("head table contains duplicate head ids")
            self._index = index
        return self._index

    def __getitem__(self, key) -> np.ndarray:
        return self._rows[self._lookup()[HeadId(*key)]]

    def __iter__(self) -> Iterator[HeadId]:
        return iter(self._heads)

    def __len__(self) -> int:
        return len(self._heads)

    def __contains__(self, key) -> bool:
        try:
            return HeadId(*key) in self._lookup()
        except (TypeError, ValueError):
            return False


# ---------------------------------------------------------------------------
# sequence layout and records


@dataclass(frozen=True)
class SequenceLayout:
    """Token index bookkeeping for one forward pass.

    ``valid_indices`` are the positions eligible as attention peaks
    (everything except special tokens); ``visual_indices`` is the subset
    covering image patches.  Both are sorted and strictly increasing.
    """

    total_len: int
    valid_indices: np.ndarray
    visual_indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "valid_indices", np.asarray(self.valid_indices, dtype=np.int64)
        )
        object.__setattr__(
            self, "visual_indices", np.asarray(self.visual_indices, dtype=np.int64)
        )
        if self.total_len < 1:
            raise ValidationError(f"sequence length {self.total_len} must be >= 1")
        for name, idx in (
            ("valid_indices", self.valid_indices),
            ("visual_indices", self.visual_indices),
        ):
            if idx.ndim != 1 or idx.size == 0:
                raise ValidationError(f"{name} must be a non-empty 1-D index list")
            if idx[0] < 0 or idx[-1] >= self.total_len:
                raise ValidationError(
                    f"{name} out of range for sequence length {self.total_len}"
                )
            if idx.size > 1 and not np.all(np.diff(idx) > 0):
                raise ValidationError(f"{name} must be strictly increasing")
        lookup = np.zeros(self.total_len, dtype=bool)
        lookup[self.valid_indices] = True
        if not lookup[self.visual_indices].all():
            bad = int(self.visual_indices[~lookup[self.visual_indices]][0])
            raise ValidationError(
                f"visual index {bad} is not in the valid index set"
            )

    @cached_property
    def visual_lookup(self) -> np.ndarray:
        """Boolean membership vector for the visual token set."""
        lookup = np.zeros(self.total_len, dtype=bool)
        lookup[self.visual_indices] = True
        lookup.flags.writeable = False
        return lookup


@dataclass
class DiagnosticRecord:
    """One profiling sample: a token, its answer mask, and attention rows."""

    token_index: int
    layout: SequenceLayout
    mask: np.ndarray
    attn: HeadTable

    @property
    def mask_support(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def mask_size(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class DiagnosticCorpus:
    n_layers: int
    n_heads: int
    records: list[DiagnosticRecord]


@dataclass
class InferenceRecord:
    """One prediction step with per-head attention and optional gradients."""

    grid_side: int
    image_w: int
    image_h: int
    patch_size: int
    predicted_token: str
    log_prob: float
    attn: HeadTable
    grad: HeadTable | None = None

    @property
    def n_visual(self) -> int:
        return self.grid_side * self.grid_side


# ---------------------------------------------------------------------------
# record validation


def check_attention_rows(rows: np.ndarray, *, context: str) -> np.ndarray:
    """Validate stacked attention rows; renormalize drifted ones.

    Rows within ``ROW_SUM_WARN`` of unit sum pass untouched.  Rows inside
    the error band are renormalized with a logged warning.  Anything worse,
    and negative entries, are rejected.
    """
    rows = np.asarray(rows)
    if not np.isfinite(rows).all():
        raise ValidationError(f"{context}: attention contains non-finite values")
    if (rows < 0).any():
        head_i, pos = np.argwhere(rows < 0)[0]
        raise ValidationError(
            f"{context}: negative attention at row {head_i}, position {pos}"
        )
    sums = rows.sum(axis=1, dtype=np.float64)
    drift = np.abs(sums - 1.0)
    if (drift > ROW_SUM_ERROR).any():
        i = int(np.argmax(drift))
        raise ValidationError(
            f"{context}: attention row {i} sums to {sums[i]:.6f}, "
            f"outside tolerance {ROW_SUM_ERROR}"
        )
    needs_fix = drift > ROW_SUM_WARN
    if needs_fix.any():
        log.warning(
            "%s: renormalizing %d attention row(s) with sum drift up to %.2e",
            context,
            int(needs_fix.sum()),
            float(drift.max()),
        )
        rows = rows.copy()
        rows[needs_fix] = rows[needs_fix] / sums[needs_fix, None]
    return rows


def _check_head_geometry(
    heads: Sequence[HeadId], n_layers: int, n_heads: int, *, context: str
) -> None:
    if len(set(heads)) != len(heads):
        raise ValidationError(f"{context}: duplicate head ids")
    for h in heads:
        if not (0 <= h.layer < n_layers and 0 <= h.head < n_heads):
            raise ValidationError(
                f"{context}: head {h.key()!r} outside geometry "
                f"{n_layers} layers x {n_heads} heads"
            )


def validate_diagnostic_record(
    record: DiagnosticRecord, n_layers: int, n_heads: int, *, context: str = "record"
) -> None:
    """Check every invariant of an already-built record."""
    layout = record.layout
    mask = np.asarray(record.mask)
    if mask.shape != (layout.total_len,):
        raise ValidationError(
            f"{context}: mask length {mask.shape} does not match "
            f"sequence length {layout.total_len}"
        )
    support = np.flatnonzero(mask)
    if support.size == 0:
        raise ValidationError(f"{context}: mask is empty")
    outside = support[~layout.visual_lookup[support]]
    if outside.size:
        raise ValidationError(
            f"{context}: mask index {int(outside[0])} is not a visual token"
        )
    if not (0 <= record.token_index < layout.total_len):
        raise ValidationError(
            f"{context}: token index {record.token_index} out of range"
        )
    _check_head_geometry(record.attn.heads, n_layers, n_heads, context=context)
    rows = record.attn.rows
    if rows.shape[1] != layout.total_len:
        raise ValidationError(
            f"{context}: attention rows have length {rows.shape[1]}, "
            f"expected {layout.total_len}"
        )
    checked = check_attention_rows(rows, context=context)
    if checked is not rows:
        raise ValidationError(f"{context}: attention rows are not normalized")


def validate_inference_record(record: InferenceRecord, *, context: str = "record") -> None:
    if record.grid_side < 1:
        raise ValidationError(f"{context}: grid side {record.grid_side} must be >= 1")
    if record.patch_size < 1 or record.image_w < 1 or record.image_h < 1:
        raise ValidationError(f"{context}: image geometry must be positive")
    n = record.n_visual
    rows = record.attn.rows
    if rows.shape[1] != n:
        raise ValidationError(
            f"{context}: attention rows have length {rows.shape[1]}, "
            f"expected {n} for grid side {record.grid_side}"
        )
    check_attention_rows(rows, context=context)
    if record.grad is not None:
        if set(record.grad.heads) != set(record.attn.heads):
            raise ValidationError(
                f"{context}: gradient heads do not match attention heads"
            )
        grows = record.grad.rows
        if grows.shape[1] != n:
            raise ValidationError(
                f"{context}: gradient rows have length {grows.shape[1]}, expected {n}"
            )
        if not np.isfinite(grows).all():
            raise ValidationError(f"{context}: gradients contain non-finite values")
    if not np.isfinite(record.log_prob) or record.log_prob > 0:
        raise ValidationError(
            f"{context}: log probability {record.log_prob} must be finite and <= 0"
        )


# ---------------------------------------------------------------------------
# manifests


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_manifest(path: Path, *, kind: str, allowed: set[str]) -> dict:
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(f"{path}: unexpected manifest keys {sorted(unknown)}")
    if doc.get("format") != "havc-manifest":
        raise ValidationError(f"{path}: not a manifest (format={doc.get('format')!r})")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValidationError(
            f"{path}: manifest version {doc.get('version')!r}, "
            f"expected {MANIFEST_VERSION}"
        )
    if doc.get("kind") != kind:
        raise ValidationError(
            f"{path}: manifest kind {doc.get('kind')!r}, expected {kind!r}"
        )
    return doc


def _require(doc: dict, key: str, *, context: str):
    if key not in doc:
        raise ValidationError(f"{context}: missing key {key!r}")
    return doc[key]


def _int_list(values, *, context: str) -> list[int]:
    if not isinstance(values, list) or not all(isinstance(v, int) for v in values):
        raise ValidationError(f"{context}: expected a list of integers")
    return values


_CORPUS_KEYS = {"format", "version", "kind", "geometry", "records"}
_RECORD_KEYS = {
    "token_index",
    "total_len",
    "valid_indices",
    "visual_indices",
    "mask_indices",
    "heads",
    "attn_file",
}
_INFERENCE_KEYS = {
    "format",
    "version",
    "kind",
    "grid_side",
    "image_w",
    "image_h",
    "patch_size",
    "predicted_token",
    "log_prob",
    "heads",
    "attn_file",
    "grad_file",
}


def save_corpus(out_dir: str | Path, corpus: DiagnosticCorpus, *, name: str = "corpus") -> Path:
    """Write a corpus as one manifest plus one stacked tensor per record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(corpus.records):
        attn_name = f"{name}_rec{i:05d}{TENSOR_SUFFIX}"
        save_tensor(out / attn_name, rec.attn.rows)
        entries.append(
            {
                "token_index": int(rec.token_index),
                "total_len": int(rec.layout.total_len),
                "valid_indices": [int(v) for v in rec.layout.valid_indices],
                "visual_indices": [int(v) for v in rec.layout.visual_indices],
                "mask_indices": [int(v) for v in rec.mask_support],
                "heads": [h.key() for h in rec.attn.heads],
                "attn_file": attn_name,
            }
        )
    doc = {
        "format": "havc-manifest",
        "version": MANIFEST_VERSION,
        "kind": "diagnostic_corpus",
        "geometry": {"n_layers": int(corpus.n_layers), "n_heads": int(corpus.n_heads)},
        "records": entries,
    }
    manifest = out / f"{name}{MANIFEST_SUFFIX}"
    _dump_json(manifest, doc)
    return manifest


def load_corpus(manifest_path: str | Path) -> DiagnosticCorpus:
    """Load and fully validate a diagnostic corpus.

    Any invariant violation raises :class:`ValidationError` naming the
    record index; a partially valid corpus is never returned.
    """
    path = Path(manifest_path)
    doc = _read_manifest(path, kind="diagnostic_corpus", allowed=_CORPUS_KEYS)
    geom = _require(doc, "geometry", context=str(path))
    n_layers = int(_require(geom, "n_layers", context=f"{path}: geometry"))
    n_heads = int(_require(geom, "n_heads", context=f"{path}: geometry"))
    if n_layers < 1 or n_heads < 1:
        raise ValidationError(f"{path}: geometry must be positive")
    entries = _require(doc, "records", context=str(path))
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: 'records' must be a list")

    records = []
    for i, entry in enumerate(entries):
        ctx = f"{path}: record {i}"
        if not isinstance(entry, dict):
            raise ValidationError(f"{ctx}: must be a JSON object")
        unknown = set(entry) - _RECORD_KEYS
        if unknown:
            raise ValidationError(f"{ctx}: unexpected keys {sorted(unknown)}")
        try:
            layout = SequenceLayout(
                total_len=int(_require(entry, "total_len", context=ctx)),
                valid_indices=_int_list(
                    _require(entry, "valid_indices", context=ctx), context=ctx
                ),
                visual_indices=_int_list(
                    _require(entry, "visual_indices", context=ctx), context=ctx
                ),
            )
        except ValidationError as exc:
            raise ValidationError(f"{ctx}: {exc}") from None
        mask = np.zeros(layout.total_len, dtype=np.uint8)
        mask_indices = np.asarray(
            _int_list(_require(entry, "mask_indices", context=ctx), context=ctx),
            dtype=np.int64,
        )
        if mask_indices.size == 0:
            raise ValidationError(f"{ctx}: mask is empty")
        if mask_indices.min(initial=0) < 0 or (mask_indices >= layout.total_len).any():
            raise ValidationError(f"{ctx}: mask index out of range")
        mask[mask_indices] = 1
        heads = [HeadId.parse(s) for s in _require(entry, "heads", context=ctx)]
        rows = load_tensor(path.parent / _require(entry, "attn_file", context=ctx))
        if rows.ndim != 2 or rows.shape[0] != len(heads):
            raise ValidationError(
                f"{ctx}: attention tensor shape {rows.shape} does not match "
                f"{len(heads)} declared heads"
            )
        if rows.shape[1] != layout.total_len:
            raise ValidationError(
                f"{ctx}: attention rows have length {rows.shape[1]}, "
                f"expected {layout.total_len}"
            )
        _check_head_geometry(heads, n_layers, n_heads, context=ctx)
        rows = check_attention_rows(rows, context=ctx)
        record = DiagnosticRecord(
            token_index=int(_require(entry, "token_index", context=ctx)),
            layout=layout,
            mask=mask,
            attn=HeadTable(heads, rows),
        )
        validate_diagnostic_record(record, n_layers, n_heads, context=ctx)
        records.append(record)
    if not records:
        raise ValidationError(f"{path}: corpus has no records")
    return DiagnosticCorpus(n_layers=n_layers, n_heads=n_heads, records=records)


def save_inference(
    out_dir: str | Path, record: InferenceRecord, *, name: str = "record"
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    attn_name = f"{name}_attn{TENSOR_SUFFIX}"
    save_tensor(out / attn_name, record.attn.rows)
    doc = {
        "format": "havc-manifest",
        "version": MANIFEST_VERSION,
        "kind": "inference_record",
        "grid_side": int(record.grid_side),
        "image_w": int(record.image_w),
        "image_h": int(record.image_h),
        "patch_size": int(record.patch_size),
        "predicted_token": record.predicted_token,
        "log_prob": float(record.log_prob),
        "heads": [h.key() for h in record.attn.heads],
        "attn_file": attn_name,
    }
    if record.grad is not None:
        grad_name = f"{name}_grad{TENSOR_SUFFIX}"
        grad_rows = np.stack([record.grad[h] for h in record.attn.heads])
        save_tensor(out / grad_name, grad_rows)
        doc["grad_file"] = grad_name
    manifest = out / f"{name}{MANIFEST_SUFFIX}"
    _dump_json(manifest, doc)
    return manifest


def load_inference(manifest_path: str | Path) -> InferenceRecord:
    """Load and fully validate an inference record."""
    path = Path(manifest_path)
    doc = _read_manifest(path, kind="inference_record", allowed=_INFERENCE_KEYS)
    ctx = str(path)
    heads = [HeadId.parse(s) for s in _require(doc, "heads", context=ctx)]
    rows = load_tensor(path.parent / _require(doc, "attn_file", context=ctx))
    if rows.ndim != 2 or rows.shape[0] != len(heads):
        raise ValidationError(
            f"{ctx}: attention tensor shape {rows.shape} does not match "
            f"{len(heads)} declared heads"
        )
    rows = check_attention_rows(rows, context=ctx)
    grad = None
    if "grad_file" in doc:
        grad_rows = load_tensor(path.parent / doc["grad_file"])
        if grad_rows.shape != rows.shape:
            raise ValidationError(
                f"{ctx}: gradient tensor shape {grad_rows.shape} does not match "
                f"attention shape {rows.shape}"
            )
        grad = HeadTable(heads, grad_rows)
    record = InferenceRecord(
        grid_side=int(_require(doc, "grid_side", context=ctx)),
        image_w=int(_require(doc, "image_w", context=ctx)),
        image_h=int(_require(doc, "image_h", context=ctx)),
        patch_size=int(_require(doc, "patch_size", context=ctx)),
        predicted_token=str(_require(doc, "predicted_token", context=ctx)),
        log_prob=float(_require(doc, "log_prob", context=ctx)),
        attn=HeadTable(heads, rows),
        grad=grad,
    )
    validate_inference_record(record, context=ctx)
    return record
