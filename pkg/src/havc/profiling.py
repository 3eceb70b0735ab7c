"""Stage one: score every attention head on a diagnostic corpus.

Each head is judged by where its attention peaks while the model reads an
answer token: peaks landing inside the answer's patch mask earn the head
``1 / mask_size`` for that record, peaks elsewhere earn zero.  Per-head
averages are min-max normalized and thresholded into an expert set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateMatrixError, ValidationError
from .tensor_store import (
    DiagnosticCorpus,
    DiagnosticRecord,
    HeadId,
    HeadTable,
    SequenceLayout,
)

log = logging.getLogger("havc.profiling")

SCORE_THRESHOLD = 0.5

_EXPERT_DOC_KEYS = {
    "format",
    "version",
    "kind",
    "geometry",
    "threshold",
    "per_layer",
    "heads",
    "normalized_scores",
}


def peak_index(attn_row: np.ndarray, layout: SequenceLayout) -> int:
    """Position of the row's maximum over the valid token set.

    Ties resolve to the lowest sequence index.
    """
    row = np.asarray(attn_row)
    if row.ndim != 1 or row.shape[0] != layout.total_len:
        raise ValidationError(
            f"attention row has length {row.shape}, expected {layout.total_len}"
        )
    valid = layout.valid_indices
    return int(valid[np.argmax(row[valid])])


def projection_score(
    attn_row: np.ndarray, mask: np.ndarray, layout: SequenceLayout
) -> float:
    """Mask credit for one row: ``1 / mask_size`` if the peak hits the mask.

    Equivalent to projecting the peak's one-hot vector onto the mask and
    dividing by the mask's L1 norm.
    """
    mask = np.asarray(mask)
    size = int(np.count_nonzero(mask))
    if size == 0:
        raise ValidationError("mask is empty")
    peak = peak_index(attn_row, layout)
    return (1.0 / size) if mask[peak] else 0.0


@dataclass
class HeadScoreMatrix:
    """Accumulated per-head scores over a corpus.

    ``raw`` holds mean scores (over the records where each head appears),
    ``counts`` the number of contributing records, and ``normalized`` the
    min-max rescaled matrix once :func:`normalize_and_filter` has run.
    """

    n_layers: int
    n_heads: int
    raw: np.ndarray
    counts: np.ndarray
    normalized: np.ndarray | None = None


@dataclass(frozen=True)
class ExpertHeadSet:
    """Heads retained by the profiling stage, in ascending (layer, head)."""

    heads: tuple[HeadId, ...]
    n_layers: int
    n_heads: int
    threshold: float = SCORE_THRESHOLD

    def __post_init__(self):
        ordered = tuple(sorted(HeadId(*h) for h in self.heads))
        if len(set(ordered)) != len(ordered):
            raise ValidationError("expert head set contains duplicates")
        for h in ordered:
            if not (0 <= h.layer < self.n_layers and 0 <= h.head < self.n_heads):
                raise ValidationError(f"expert head {h.key()!r} outside geometry")
        object.__setattr__(self, "heads", ordered)

    def __iter__(self) -> Iterator[HeadId]:
        return iter(self.heads)

    def __len__(self) -> int:
        return len(self.heads)

    def __contains__(self, head) -> bool:
        return HeadId(*head) in set(self.heads)


@lru_cache(maxsize=8)
def _head_coords(heads: tuple[HeadId, ...]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(heads, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def _record_scores(record: DiagnosticRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized per-record scores for every head present in the record."""
    heads = record.attn.heads
    rows = record.attn.rows
    valid = record.layout.valid_indices
    peaks = valid[np.argmax(rows[:, valid], axis=1)]
    mask = np.asarray(record.mask) != 0
    size = int(mask.sum())
    scores = np.where(mask[peaks], 1.0 / size, 0.0)
    layers, cols = _head_coords(heads)
    return layers, cols, scores


def accumulate_scores(corpus: DiagnosticCorpus) -> HeadScoreMatrix:
    """Average projection scores per head across the whole corpus.

    Heads absent from a record simply do not contribute to it; a head that
    appears in no record keeps a zero mean and a zero count.
    """
    if not corpus.records:
        raise ValidationError("corpus has no records")
    n_layers, n_heads = corpus.n_layers, corpus.n_heads
    total = np.zeros((n_layers, n_heads), dtype=np.float64)
    counts = np.zeros((n_layers, n_heads), dtype=np.int64)
    for i, record in enumerate(corpus.records):
        layers, cols, scores = _record_scores(record)
        if layers.size and (layers.max() >= n_layers or cols.max() >= n_heads):
            raise ValidationError(f"record {i}: head outside corpus geometry")
        np.add.at(total, (layers, cols), scores)
        np.add.at(counts, (layers, cols), 1)
    raw = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return HeadScoreMatrix(n_layers=n_layers, n_heads=n_heads, raw=raw, counts=counts)


def _minmax_rows(values: np.ndarray, present: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    any_row = False
    for i in range(values.shape[0]):
        sel = present[i]
        if not sel.any():
            continue
        lo = values[i, sel].min()
        hi = values[i, sel].max()
        if hi > lo:
            out[i, sel] = (values[i, sel] - lo) / (hi - lo)
            any_row = True
    if not any_row:
        raise DegenerateMatrixError("score matrix is constant within every layer")
    return out


def normalize_and_filter(
    matrix: HeadScoreMatrix,
    threshold: float = SCORE_THRESHOLD,
    *,
    per_layer: bool = False,
) -> ExpertHeadSet:
    """Min-max normalize the score matrix and keep heads above ``threshold``.

    Normalization is strict: scores equal to the threshold are dropped.
    By default the rescale is global over the matrix; ``per_layer`` rescales
    each layer independently.  Heads that appeared in no record are excluded
    from the rescale and can never be selected.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValidationError(f"threshold {threshold} outside [0, 1]")
    present = matrix.counts > 0
    if not present.any():
        raise ValidationError("score matrix has no observed heads")
    if per_layer:
        normalized = _minmax_rows(matrix.raw, present)
    else:
        lo = matrix.raw[present].min()
        hi = matrix.raw[present].max()
        if hi == lo:
            raise DegenerateMatrixError(
                f"score matrix is constant at {lo:.6g}; no head stands out"
            )
        normalized = np.zeros_like(matrix.raw)
        normalized[present] = (matrix.raw[present] - lo) / (hi - lo)
    matrix.normalized = normalized
    keep = np.argwhere(present & (normalized > threshold))
    heads = tuple(HeadId(int(l), int(h)) for l, h in keep)
    log.info("retained %d of %d observed heads", len(heads), int(present.sum()))
    return ExpertHeadSet(
        heads=heads,
        n_layers=matrix.n_layers,
        n_heads=matrix.n_heads,
        threshold=threshold,
    )


def profile_corpus(
    corpus: DiagnosticCorpus,
    threshold: float = SCORE_THRESHOLD,
    *,
    per_layer: bool = False,
) -> tuple[HeadScoreMatrix, ExpertHeadSet]:
    """Run the full profiling stage: accumulate, normalize, filter."""
    matrix = accumulate_scores(corpus)
    experts = normalize_and_filter(matrix, threshold, per_layer=per_layer)
    return matrix, experts


def write_expert_heads(
    path: str | Path,
    experts: ExpertHeadSet,
    matrix: HeadScoreMatrix | None = None,
    *,
    per_layer: bool = False,
) -> None:
    """Persist an expert set (and optionally its score matrix) as JSON."""
    doc = {
        "format": "havc-expert-heads",
        "version": 1,
        "kind": "expert_heads",
        "geometry": {"n_layers": experts.n_layers, "n_heads": experts.n_heads},
        "threshold": experts.threshold,
        "per_layer": per_layer,
        "heads": [[h.layer, h.head] for h in experts.heads],
    }
    if matrix is not None and matrix.normalized is not None:
        doc["normalized_scores"] = [list(map(float, row)) for row in matrix.normalized]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_expert_heads(path: str | Path) -> ExpertHeadSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expert head file must be a JSON object")
    unknown = set(doc) - _EXPERT_DOC_KEYS
    if unknown:
        raise ValidationError(f"{path}: unexpected keys {sorted(unknown)}")
    if doc.get("format") != "havc-expert-heads" or doc.get("kind") != "expert_heads":
        raise ValidationError(f"{path}: not an expert head file")
    if doc.get("version") != 1:
        raise ValidationError(f"{path}: unsupported version {doc.get('version')!r}")
    geom = doc.get("geometry")
    if not isinstance(geom, dict) or "n_layers" not in geom or "n_heads" not in geom:
        raise ValidationError(f"{path}: missing geometry")
    raw_heads = doc.get("heads")
    if not isinstance(raw_heads, list):
        raise ValidationError(f"{path}: 'heads' must be a list")
    heads = []
    for item in raw_heads:
        if not (isinstance(item, list) and len(item) == 2):
            raise ValidationError(f"{path}: malformed head entry {item!r}")
        heads.append(HeadId(int(item[0]), int(item[1])))
    return ExpertHeadSet(
        heads=tuple(heads),
        n_layers=int(geom["n_layers"]),
        n_heads=int(geom["n_heads"]),
        threshold=float(doc.get("threshold", SCORE_THRESHOLD)),
    )
