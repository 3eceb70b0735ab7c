"""Frozen miniature vision-language model with a capture adapter.

The model is a real, if small, causal transformer over a sequence of one
start marker, grid*grid visual patch embeddings, and word tokens drawn
from a fixed vocabulary.  Weights come from one seeded draw and are never
updated, generation is greedy, and every forward runs in float64 so that
finite-difference probes of the capture path are sharp.

The forward pass can replace a single attention probability row before
the value mix and recompute everything downstream.  That override defines
the functional whose gradient the capture path reports, which is what the
finite-difference contract check exercises.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .adapters import StepCapture, register_adapter
from .errors import GeometryError

VOCAB: tuple[str, ...] = (
    "<bos>",
    "<unk>",
    "read", "the", "text", "in", "this", "image", "what", "does", "it", "say",
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango",
)

BOS_ID = 0
UNK_ID = 1
# First id that decodes to a plain word rather than a special marker.
FIRST_WORD_ID = 2

DEFAULT_SEED = 20230817

Override = tuple[int, int, int, torch.Tensor]


def _greedy(logits_row: torch.Tensor) -> int:
    """Greedy choice with the special markers suppressed at decode time."""
    return FIRST_WORD_ID + int(torch.argmax(logits_row[FIRST_WORD_ID:]))


def _mat(shape: tuple[int, ...], scale: float, gen: torch.Generator) -> torch.nn.Parameter:
    return torch.nn.Parameter(
        torch.randn(shape, generator=gen, dtype=torch.float64) * scale
    )


class _Block(torch.nn.Module):
    """One pre-norm transformer block with explicit projection matrices."""

    def __init__(self, d_model: int, gen: torch.Generator):
        super().__init__()
        d = d_model
        # Small query/key scales keep attention soft; saturated rows would
        # zero the gradients the capture path exists to measure.
        self.wq = _mat((d, d), 0.3 / math.sqrt(d), gen)
        self.wk = _mat((d, d), 0.3 / math.sqrt(d), gen)
        self.wv = _mat((d, d), 1.0 / math.sqrt(d), gen)
        self.wo = _mat((d, d), 0.5 / math.sqrt(d), gen)
        self.w1 = _mat((d, 2 * d), 1.0 / math.sqrt(d), gen)
        self.w2 = _mat((2 * d, d), 0.5 / math.sqrt(2 * d), gen)


class _TinyTransformer(torch.nn.Module):
    """Decoder-only transformer in float64 with hookable attention."""

    def __init__(
        self,
        *,
        grid_side: int,
        patch_size: int,
        d_model: int,
        n_layers: int,
        n_heads: int,
        max_text_len: int,
        seed: int,
    ):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.grid_side = grid_side
        self.patch_size = patch_size
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.max_len = 1 + grid_side * grid_side + max_text_len
        gen = torch.Generator().manual_seed(seed)
        p2 = patch_size * patch_size
        self.patch_proj = _mat((p2, d_model), 1.0 / patch_size, gen)
        self.tok_emb = _mat((len(VOCAB), d_model), 1.0, gen)
        self.pos_emb = _mat((self.max_len, d_model), 0.3, gen)
        self.blocks = torch.nn.ModuleList(
            _Block(d_model, gen) for _ in range(n_layers)
        )
        self.w_out = _mat((d_model, len(VOCAB)), 1.0 / math.sqrt(d_model), gen)

    def embed(self, patches: torch.Tensor, token_ids: Sequence[int]) -> torch.Tensor:
        """Assemble [BOS, visual..., words...] embeddings with positions."""
        vis = patches @ self.patch_proj
        parts = [self.tok_emb[BOS_ID].unsqueeze(0), vis]
        if token_ids:
            parts.append(self.tok_emb[list(token_ids)])
        x = torch.cat(parts, dim=0)
        if x.shape[0] > self.max_len:
            raise GeometryError(
                f"sequence length {x.shape[0]} exceeds model maximum {self.max_len}"
            )
        return x + self.pos_emb[: x.shape[0]]

    def forward(
        self, x: torch.Tensor, *, override: Override | None = None, keep_attn: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        length = x.shape[0]
        future = torch.triu(
            torch.ones(length, length, dtype=torch.bool), diagonal=1
        )
        attns: list[torch.Tensor] = []
        for li, blk in enumerate(self.blocks):
            h = F.layer_norm(x, x.shape[-1:])
            heads_view = (length, self.n_heads, self.d_head)
            q = (h @ blk.wq).reshape(heads_view).transpose(0, 1)
            k = (h @ blk.wk).reshape(heads_view).transpose(0, 1)
            v = (h @ blk.wv).reshape(heads_view).transpose(0, 1)
            scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
            scores = scores.masked_fill(future, float("-inf"))
            probs = torch.softmax(scores, dim=-1)
            if override is not None and override[0] == li:
                _, head_i, query_i, row = override
                probs = probs.clone()
                probs[head_i, query_i, :] = row
            if keep_attn:
                if probs.requires_grad:
                    probs.retain_grad()
                attns.append(probs)
            ctx = (probs @ v).transpose(0, 1).reshape(length, -1)
            x = x + ctx @ blk.wo
            h2 = F.layer_norm(x, x.shape[-1:])
            x = x + F.gelu(h2 @ blk.w1) @ blk.w2
        logits = F.layer_norm(x, x.shape[-1:]) @ self.w_out
        return logits, attns


class TinyVlmAdapter:
    """Adapter exposing the frozen tiny model to the export operations."""

    name = "tiny"
    exposes_attention = True

    def __init__(
        self,
        *,
        grid_side: int = 8,
        patch_size: int = 8,
        d_model: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        max_text_len: int = 24,
        seed: int = DEFAULT_SEED,
    ):
        self._model = _TinyTransformer(
            grid_side=grid_side,
            patch_size=patch_size,
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            max_text_len=max_text_len,
            seed=seed,
        )
        self._model.eval()
        self._n_layers = n_layers
        self._vocab_index = {word: i for i, word in enumerate(VOCAB)}

    @property
    def n_layers(self) -> int:
        return self._n_layers

    @property
    def n_heads(self) -> int:
        return self._model.n_heads

    @property
    def grid_side(self) -> int:
        return self._model.grid_side

    @property
    def patch_size(self) -> int:
        return self._model.patch_size

    @property
    def image_size(self) -> int:
        return self.grid_side * self.patch_size

    # -- text ---------------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        """Whitespace word tokenizer; unknown words map to the UNK id."""
        return [self._vocab_index.get(w, UNK_ID) for w in text.lower().split()]

    def token_id(self, word: str) -> int | None:
        return self._vocab_index.get(word.lower())

    def decode(self, token_id: int) -> str:
        return VOCAB[token_id]

    # -- vision -------------------------------------------------------------

    def _patches(self, image: np.ndarray) -> torch.Tensor:
        """Row-major patch flattening; integer images are scaled to [0, 1]."""
        arr = np.asarray(image)
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr / 255.0
        arr = np.asarray(arr, dtype=np.float64)
        side = self.image_size
        if arr.shape != (side, side):
            raise GeometryError(
                f"image shape {arr.shape} does not match model size ({side}, {side})"
            )
        g, p = self.grid_side, self.patch_size
        tiled = torch.from_numpy(arr).reshape(g, p, g, p)
        return tiled.permute(0, 2, 1, 3).reshape(g * g, p * p)

    # -- capture ------------------------------------------------------------

    def generate(
        self, image: np.ndarray, token_ids: Sequence[int], max_new_tokens: int
    ) -> list[int]:
        """Greedy decoding; returns only the newly generated ids."""
        patches = self._patches(image)
        tokens = list(token_ids)
        out: list[int] = []
        with torch.no_grad():
            for _ in range(max_new_tokens):
                x = self._model.embed(patches, tokens)
                logits, _ = self._model(x)
                nxt = _greedy(logits[-1])
                out.append(nxt)
                tokens.append(nxt)
        return out

    def capture_step(
        self,
        image: np.ndarray,
        token_ids: Sequence[int],
        *,
        target_id: int | None = None,
        with_grad: bool = False,
    ) -> StepCapture:
        """Hook attention (and optionally gradients) at one decoding step.

        The query is the last position of the assembled sequence.  With
        gradient capture on, log p(target) is backpropagated to every
        layer's attention probabilities, treating downstream layers as
        dependent, which matches an override-and-recompute perturbation.
        """
        patches = self._patches(image)
        x = self._model.embed(patches, list(token_ids))
        q = x.shape[0] - 1
        if with_grad:
            logits, attns = self._model(x, keep_attn=True)
        else:
            with torch.no_grad():
                logits, attns = self._model(x, keep_attn=True)
        log_probs = torch.log_softmax(logits[q], dim=-1)
        chosen = _greedy(logits[q]) if target_id is None else int(target_id)
        log_prob = log_probs[chosen]
        grad_rows = None
        if with_grad:
            log_prob.backward()
            grad_rows = [a.grad[:, q, :].numpy().copy() for a in attns]
        attn_rows = [a.detach()[:, q, :].numpy().copy() for a in attns]
        return StepCapture(
            next_token_id=chosen,
            log_prob=float(log_prob.detach()),
            attn=attn_rows,
            grad=grad_rows,
        )

    def log_prob_with_attention_override(
        self,
        image: np.ndarray,
        token_ids: Sequence[int],
        *,
        layer: int,
        head: int,
        row: np.ndarray,
        target_id: int,
    ) -> float:
        """Log p(target) when one head's query row is pinned verbatim.

        The row replaces the attention probabilities of (layer, head) at
        the final query position with no renormalization; downstream
        layers are recomputed.  Central differences of this functional
        are the reference for the captured gradients.
        """
        patches = self._patches(image)
        x = self._model.embed(patches, list(token_ids))
        q = x.shape[0] - 1
        row_t = torch.as_tensor(np.asarray(row), dtype=torch.float64)
        if row_t.shape != (x.shape[0],):
            raise GeometryError(
                f"override row has shape {tuple(row_t.shape)}, expected ({x.shape[0]},)"
            )
        with torch.no_grad():
            logits, _ = self._model(x, override=(layer, head, q, row_t))
        return float(torch.log_softmax(logits[q], dim=-1)[target_id])


register_adapter("tiny", TinyVlmAdapter)
