"""Capture harness writing havc diagnostic corpora and inference records.

Hooks a model's per-head attention (and, for inference records, the
gradient of the answer's log probability with respect to attention)
during greedy decoding, aligns generated tokens with ground-truth text
regions, and writes the results in the havc on-disk formats.  Models
plug in through :mod:`havc_exporter.adapters`; a frozen miniature
transformer ships in :mod:`havc_exporter.tiny_model` for testing and
demos.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .adapters import ModelAdapter, StepCapture, get_adapter, register_adapter, registered_models
from .alignment import overlap_fraction, region_patches, region_token_indices
from .demo import make_demo_items
from .errors import AlignmentError, ExporterError, GeometryError, UnsupportedModelError
from .export import (
    DiagnosticItem,
    ExportSummary,
    HookSession,
    export_diagnostic,
    export_inference,
)
from .tiny_model import TinyVlmAdapter

__all__ = [
    "__version__",
    # errors
    "ExporterError",
    "UnsupportedModelError",
    "GeometryError",
    "AlignmentError",
    # adapters
    "ModelAdapter",
    "StepCapture",
    "register_adapter",
    "get_adapter",
    "registered_models",
    "TinyVlmAdapter",
    # alignment
    "overlap_fraction",
    "region_patches",
    "region_token_indices",
    # export operations
    "HookSession",
    "DiagnosticItem",
    "ExportSummary",
    "export_diagnostic",
    "export_inference",
    "make_demo_items",
]
