"""Export operations: capture model activity and write havc data files.

The core package is consumed only through its public surface: records
are assembled from :mod:`havc` types and written with its save functions
into a scratch directory, then published into the output directory with
atomic renames (manifest last, so a reader never sees a manifest whose
tensors are still missing).
"""

from __future__ import annotations

import os
import shutil
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from havc import (
    DiagnosticCorpus,
    DiagnosticRecord,
    HeadId,
    HeadTable,
    InferenceRecord,
    SequenceLayout,
    read_expert_heads,
    save_corpus,
    save_inference,
)

from .adapters import ModelAdapter, StepCapture
from .alignment import Box, region_token_indices
from .errors import AlignmentError, GeometryError, UnsupportedModelError

DEFAULT_PROMPT = "read the text in this image"
DEFAULT_QUESTION = "what does the image say"
DEFAULT_MAX_NEW_TOKENS = 6


@dataclass(frozen=True)
class DiagnosticItem:
    """One labelled input: an image, the word written in it, and its box."""

    image: np.ndarray
    word: str
    box: Box


@dataclass
class ExportSummary:
    """What a diagnostic export run produced and what it had to skip."""

    manifest: Path
    n_records: int
    n_skipped: int
    skip_reasons: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class HookSession:
    """Capture context for one export run.

    Pins the geometry the manifest will declare; every captured tensor is
    checked against it so a manifest can never disagree with its data.
    """

    model: str
    n_layers: int
    n_heads: int
    grid_side: int
    patch_size: int

    @classmethod
    def open(cls, adapter: ModelAdapter) -> "HookSession":
        if not getattr(adapter, "exposes_attention", False):
            name = getattr(adapter, "name", type(adapter).__name__)
            raise UnsupportedModelError(
                f"model {name!r} does not expose per-head attention"
            )
        return cls(
            model=adapter.name,
            n_layers=adapter.n_layers,
            n_heads=adapter.n_heads,
            grid_side=adapter.grid_side,
            patch_size=adapter.patch_size,
        )

    @property
    def n_visual(self) -> int:
        return self.grid_side * self.grid_side

    def check_capture(self, capture: StepCapture, seq_len: int) -> None:
        if len(capture.attn) != self.n_layers:
            raise GeometryError(
                f"captured {len(capture.attn)} layers, expected {self.n_layers}"
            )
        tensors: list[list[np.ndarray]] = [capture.attn]
        if capture.grad is not None:
            if len(capture.grad) != self.n_layers:
                raise GeometryError(
                    f"captured {len(capture.grad)} gradient layers, "
                    f"expected {self.n_layers}"
                )
            tensors.append(capture.grad)
        for rows_per_layer in tensors:
            for li, rows in enumerate(rows_per_layer):
                if rows.shape != (self.n_heads, seq_len):
                    raise GeometryError(
                        f"layer {li} capture has shape {rows.shape}, "
                        f"expected ({self.n_heads}, {seq_len})"
                    )

    def layout(self, n_text: int) -> SequenceLayout:
        """Sequence layout for [BOS, visual tokens, n_text words]."""
        total = 1 + self.n_visual + n_text
        return SequenceLayout(
            total_len=total,
            valid_indices=np.arange(1, total),
            visual_indices=np.arange(1, 1 + self.n_visual),
        )


def _publish_atomic(out_dir: str | Path, write: Callable[[Path], Path]) -> Path:
    """Run a writer against a scratch directory, then rename into place.

    The scratch directory lives inside the destination, so every rename
    stays on one filesystem and os.replace is atomic.  The manifest moves
    last.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".export-", dir=out))
    try:
        manifest = write(tmp)
        for path in sorted(tmp.iterdir()):
            if path != manifest:
                os.replace(path, out / path.name)
        final = out / manifest.name
        os.replace(manifest, final)
        return final
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _all_heads(session: HookSession) -> tuple[HeadId, ...]:
    return tuple(
        HeadId(layer, head)
        for layer in range(session.n_layers)
        for head in range(session.n_heads)
    )


def export_diagnostic(
    adapter: ModelAdapter,
    items: Iterable[DiagnosticItem],
    out_dir: str | Path,
    *,
    prompt: str = DEFAULT_PROMPT,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    name: str = "corpus",
) -> ExportSummary:
    """Run the reading diagnostic over labelled images and write a corpus.

    For every generated token that matches an item's ground-truth word,
    one record is written: all heads' attention rows at the step that
    predicted the token, masked by the visual tokens the ground-truth box
    marks.  Items whose word is out of vocabulary, never generated, or
    whose box marks no visual token are skipped and counted; an image
    whose word is never generated therefore contributes zero records.
    """
    session = HookSession.open(adapter)
    heads = _all_heads(session)
    prompt_ids = adapter.tokenize(prompt)
    records: list[DiagnosticRecord] = []
    skipped: Counter = Counter()
    for item in items:
        target = adapter.token_id(item.word)
        if target is None:
            skipped["word_out_of_vocab"] += 1
            continue
        try:
            mask_positions = region_token_indices(
                item.box,
                session.grid_side,
                session.patch_size,
                session.layout(0).visual_indices,
            )
        except AlignmentError:
            skipped["region_unmapped"] += 1
            continue
        generated = adapter.generate(item.image, prompt_ids, max_new_tokens)
        hit_steps = [i for i, tok in enumerate(generated) if tok == target]
        if not hit_steps:
            skipped["word_never_generated"] += 1
            continue
        for step in hit_steps:
            tokens = prompt_ids + generated[:step]
            capture = adapter.capture_step(item.image, tokens, target_id=target)
            layout = session.layout(len(tokens))
            session.check_capture(capture, layout.total_len)
            mask = np.zeros(layout.total_len, dtype=np.uint8)
            mask[mask_positions] = 1
            rows = np.concatenate(capture.attn, axis=0).astype(np.float32)
            records.append(
                DiagnosticRecord(
                    token_index=layout.total_len - 1,
                    layout=layout,
                    mask=mask,
                    attn=HeadTable(heads, rows),
                )
            )
    if not records:
        raise AlignmentError(
            "no generated token matched any ground-truth word, so there is "
            f"no corpus to write (skipped: {dict(skipped) or 'nothing'})"
        )
    corpus = DiagnosticCorpus(
        n_layers=session.n_layers, n_heads=session.n_heads, records=records
    )
    manifest = _publish_atomic(
        out_dir, lambda tmp: save_corpus(tmp, corpus, name=name)
    )
    return ExportSummary(
        manifest=manifest,
        n_records=len(records),
        n_skipped=sum(skipped.values()),
        skip_reasons=skipped,
    )


def export_inference(
    adapter: ModelAdapter,
    image: np.ndarray,
    question: str,
    experts_path: str | Path,
    out_dir: str | Path,
    *,
    with_grad: bool = True,
    token_step: int = 0,
    name: str = "record",
) -> Path:
    """Capture expert-head attention at one answer token and write a record.

    The capture lands on the first generated answer token by default;
    ``token_step`` selects a later one.  Attention over the visual slice
    is renormalized to a distribution; gradients stay raw, as the
    derivative of log p(answer) with respect to each attention entry.
    With gradient capture off the record carries attention only and the
    consuming pipeline falls back with its own warning.
    """
    if token_step < 0:
        raise ValueError(f"token step {token_step} must be >= 0")
    session = HookSession.open(adapter)
    experts = read_expert_heads(experts_path)
    if not len(experts):
        raise GeometryError(f"{experts_path}: expert head set is empty")
    for h in experts:
        if not (h.layer < session.n_layers and h.head < session.n_heads):
            raise GeometryError(
                f"expert head {h.key()!r} outside the model's "
                f"{session.n_layers}x{session.n_heads} head geometry"
            )
    prompt_ids = adapter.tokenize(question)
    generated = (
        adapter.generate(image, prompt_ids, token_step) if token_step else []
    )
    tokens = prompt_ids + generated
    capture = adapter.capture_step(image, tokens, with_grad=with_grad)
    layout = session.layout(len(tokens))
    session.check_capture(capture, layout.total_len)
    visual = layout.visual_indices
    expert_heads = tuple(experts.heads)
    attn = np.stack([capture.attn[h.layer][h.head, visual] for h in expert_heads])
    mass = attn.sum(axis=1, keepdims=True)
    if (mass <= 0).any():
        raise GeometryError("a captured head puts no attention on visual tokens")
    attn = attn / mass
    grad_table = None
    if capture.grad is not None:
        grad = np.stack(
            [capture.grad[h.layer][h.head, visual] for h in expert_heads]
        )
        grad_table = HeadTable(expert_heads, grad.astype(np.float32))
    record = InferenceRecord(
        grid_side=session.grid_side,
        image_w=session.grid_side * session.patch_size,
        image_h=session.grid_side * session.patch_size,
        patch_size=session.patch_size,
        predicted_token=adapter.decode(capture.next_token_id),
        log_prob=capture.log_prob,
        attn=HeadTable(expert_heads, attn.astype(np.float32)),
        grad=grad_table,
    )
    return _publish_atomic(
        out_dir, lambda tmp: save_inference(tmp, record, name=name)
    )
