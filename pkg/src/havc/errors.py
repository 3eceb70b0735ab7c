"""Exception types shared across the package.

The CLI maps these onto exit codes, so the distinctions matter: format
errors and validation errors are "bad input data" (exit 2), degenerate
results are "the pipeline had nothing to say" (exit 3).
"""

from __future__ import annotations


class HavcError(Exception):
    """Base class for all errors raised by this package."""


class TensorFormatError(HavcError):
    """Base class for problems with the binary tensor format."""


class BadMagicError(TensorFormatError):
    """Stream does not start with the expected magic bytes."""


class UnsupportedVersionError(TensorFormatError):
    """Format version is not one this reader understands."""


class DimOverflowError(TensorFormatError):
    """Declared dimensions are out of the supported range."""


class TruncatedStreamError(TensorFormatError):
    """Stream ended before the declared payload was complete."""


class NonFiniteValueError(TensorFormatError):
    """Tensor payload contains NaN or infinite values."""


class TrailingDataError(TensorFormatError):
    """A standalone tensor file has bytes after the payload."""


class ValidationError(HavcError):
    """Structured input (manifest, record, corpus) violates an invariant."""


class DegenerateMatrixError(HavcError):
    """Score matrix is constant; no head carries information."""


class NoSalientRegionError(HavcError):
    """Guidance map is identically zero; no region to crop."""


class ConfigError(ValidationError):
    """Run configuration (file, flags, or estimator knobs) is invalid.

    Subclass of ValidationError: a bad configuration is a validation
    failure, but the CLI maps it to the usage exit code, not the data one.
    """


class PipelineError(HavcError):
    """Failure inside a pipeline run, labeled with the stage that raised."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
