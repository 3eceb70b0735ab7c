"""Expert-head profiling and attention-guided visual cropping.

The package is organized around two stages.  Stage one
(:mod:`havc.profiling`) scores every attention head of a model on a
diagnostic corpus and keeps the heads that reliably peak inside answer
regions.  Stage two (:mod:`havc.guidance`) re-checks those heads on a
single prediction, fuses a spatial-focus signal with a gradient signal,
and aggregates the best heads into a guidance map from which a crop box
is extracted.

Supporting modules: :mod:`havc.tensor_store` for the on-disk formats,
:mod:`havc.spatial` for grid kernels, :mod:`havc.synth` and
:mod:`havc.bench` for seeded synthetic evaluation, :mod:`havc.oracles`
for independent reference implementations, and :mod:`havc.estimators`
for scikit-learn style wrappers.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    BadMagicError,
    ConfigError,
    DegenerateMatrixError,
    DimOverflowError,
    HavcError,
    NonFiniteValueError,
    NoSalientRegionError,
    PipelineError,
    TensorFormatError,
    TrailingDataError,
    TruncatedStreamError,
    UnsupportedVersionError,
    ValidationError,
)
from .estimators import GuidanceMapper, HeadProfiler
from .guidance import (
    EntropyParams,
    FusionParams,
    GuidanceParams,
    GuidanceResult,
    HeadAssessment,
    run_pipeline,
)
from .profiling import (
    ExpertHeadSet,
    HeadScoreMatrix,
    profile_corpus,
    read_expert_heads,
    write_expert_heads,
)
from .spatial import BoxParams, CropBox, ImageGeometry, extract_bbox
from .synth import ScenarioSpec, SurrogateModel, gen_diagnostic_corpus, gen_inference_record, make_surrogate
from .tensor_store import (
    DiagnosticCorpus,
    DiagnosticRecord,
    HeadId,
    HeadTable,
    InferenceRecord,
    SequenceLayout,
    load_corpus,
    load_inference,
    load_tensor,
    save_corpus,
    save_inference,
    save_tensor,
)

__all__ = [
    "__version__",
    # errors
    "HavcError",
    "TensorFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "DimOverflowError",
    "TruncatedStreamError",
    "NonFiniteValueError",
    "TrailingDataError",
    "ValidationError",
    "DegenerateMatrixError",
    "NoSalientRegionError",
    "ConfigError",
    "PipelineError",
    # data types and I/O
    "HeadId",
    "HeadTable",
    "SequenceLayout",
    "DiagnosticRecord",
    "DiagnosticCorpus",
    "InferenceRecord",
    "load_tensor",
    "save_tensor",
    "load_corpus",
    "save_corpus",
    "load_inference",
    "save_inference",
    # stage one
    "ExpertHeadSet",
    "HeadScoreMatrix",
    "profile_corpus",
    "read_expert_heads",
    "write_expert_heads",
    # stage two
    "EntropyParams",
    "FusionParams",
    "GuidanceParams",
    "GuidanceResult",
    "HeadAssessment",
    "run_pipeline",
    "BoxParams",
    "CropBox",
    "ImageGeometry",
    "extract_bbox",
    # synthetic scenarios
    "ScenarioSpec",
    "SurrogateModel",
    "gen_diagnostic_corpus",
    "gen_inference_record",
    "make_surrogate",
    # estimators
    "HeadProfiler",
    "GuidanceMapper",
]
