"""Exception hierarchy for the capture harness."""

from __future__ import annotations


class ExporterError(Exception):
    """Base class for every error raised by this package."""


class UnsupportedModelError(ExporterError):
    """The requested model is unknown or does not expose what capture needs."""


class GeometryError(ExporterError):
    """Inputs or captured tensors disagree with the adapter's geometry."""


class AlignmentError(ExporterError):
    """A ground-truth region or word cannot be mapped onto model tokens."""
