"""Capture adapter protocol and the model registry.

An adapter owns one loaded model and exposes the minimal surface the
export operations need: tokenization, greedy generation, and per-head
attention rows (plus optional gradients) hooked out of a single decoding
step.  Models register a factory under a string id; asking for an
unregistered id raises :class:`UnsupportedModelError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import UnsupportedModelError


@dataclass
class StepCapture:
    """Everything hooked out of one decoding step.

    ``attn`` holds one [n_heads, seq_len] array per layer: each head's
    attention row at the query position (the last token of the input).
    ``grad`` mirrors it with d log p(target) / d attention entry, or is
    None when gradient capture was off.  ``next_token_id`` is the greedy
    choice unless the caller pinned a target, and ``log_prob`` is the log
    probability of that token.
    """

    next_token_id: int
    log_prob: float
    attn: list[np.ndarray]
    grad: list[np.ndarray] | None


class ModelAdapter(Protocol):
    """Capture surface the export operations program against."""

    name: str
    exposes_attention: bool

    @property
    def n_layers(self) -> int: ...

    @property
    def n_heads(self) -> int: ...

    @property
    def grid_side(self) -> int: ...

    @property
    def patch_size(self) -> int: ...

    @property
    def image_size(self) -> int: ...

    def tokenize(self, text: str) -> list[int]: ...

    def token_id(self, word: str) -> int | None: ...

    def decode(self, token_id: int) -> str: ...

    def generate(
        self, image: np.ndarray, token_ids: Sequence[int], max_new_tokens: int
    ) -> list[int]: ...

    def capture_step(
        self,
        image: np.ndarray,
        token_ids: Sequence[int],
        *,
        target_id: int | None = None,
        with_grad: bool = False,
    ) -> StepCapture: ...


_REGISTRY: dict[str, Callable[..., ModelAdapter]] = {}


def register_adapter(name: str, factory: Callable[..., ModelAdapter]) -> None:
    """Register a model factory under a command-line id."""
    if name in _REGISTRY:
        raise ValueError(f"adapter {name!r} is already registered")
    _REGISTRY[name] = factory


def get_adapter(name: str, **kwargs) -> ModelAdapter:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY)) or "none"
        raise UnsupportedModelError(
            f"unknown model {name!r}; registered adapters: {known}"
        ) from None
    return factory(**kwargs)


def registered_models() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))
