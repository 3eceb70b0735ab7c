"""Deterministic demo inputs for the capture harness.

Each image is low noise with one bright rectangle standing in for a text
region.  Because the model is frozen, ground truth for a matchable item
can be chosen by probing: generate once and label the image with a word
the model actually emits.  Every few items get a word the model never
emits for that image, exercising the skip path.
"""

from __future__ import annotations

import numpy as np

from .adapters import ModelAdapter
from .export import DEFAULT_MAX_NEW_TOKENS, DEFAULT_PROMPT, DiagnosticItem
from .tiny_model import FIRST_WORD_ID, VOCAB


def make_demo_items(
    adapter: ModelAdapter,
    n_items: int,
    *,
    seed: int = 0,
    prompt: str = DEFAULT_PROMPT,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    unmatched_every: int = 5,
) -> list[DiagnosticItem]:
    """Fabricate n_items labelled images; every unmatched_every-th item
    carries a word the model does not generate for it."""
    if n_items < 1:
        raise ValueError(f"need at least one item, got {n_items}")
    if unmatched_every < 1:
        raise ValueError(f"unmatched_every {unmatched_every} must be >= 1")
    rng = np.random.default_rng([seed, 11])
    prompt_ids = adapter.tokenize(prompt)
    side = adapter.image_size
    p = adapter.patch_size
    items: list[DiagnosticItem] = []
    for i in range(n_items):
        # A box at least two patches per side always contains one fully
        # covered patch, so the region always maps to visual tokens.
        w = int(rng.integers(2 * p, 3 * p + 1))
        h = int(rng.integers(2 * p, 3 * p + 1))
        x0 = int(rng.integers(0, side - w + 1))
        y0 = int(rng.integers(0, side - h + 1))
        canvas = rng.uniform(0.0, 0.25, size=(side, side))
        canvas[y0 : y0 + h, x0 : x0 + w] += 0.65
        image = (np.clip(canvas, 0.0, 1.0) * 255).round().astype(np.uint8)
        # Probe with the quantized image, which is exactly what an export
        # run will see after a pixmap round trip.
        generated = adapter.generate(image, prompt_ids, max_new_tokens)
        emitted = {adapter.decode(t) for t in generated}
        if (i + 1) % unmatched_every == 0:
            word = next(w for w in VOCAB[FIRST_WORD_ID:] if w not in emitted)
        else:
            word = adapter.decode(generated[0])
        items.append(DiagnosticItem(image=image, word=word, box=(x0, y0, x0 + w, y0 + h)))
    return items
