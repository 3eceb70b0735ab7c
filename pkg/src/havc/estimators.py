"""Estimator-style wrappers around the two pipeline stages.

:class:`HeadProfiler` is fit on a diagnostic corpus and exposes the score
matrix and expert set; :class:`GuidanceMapper` is fit on an expert set and
predicts crop guidance for inference records.  Both follow the scikit-learn
parameter conventions so they compose with its tooling (``get_params``,
``clone``, pipelines).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ValidationError
from .guidance import GuidanceResult, run_pipeline
from .profiling import ExpertHeadSet, HeadScoreMatrix, profile_corpus
from .tensor_store import DiagnosticCorpus, InferenceRecord


def _check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet. "
            "Call 'fit' before using this method."
        )


class HeadProfiler(BaseEstimator):
    """Learn which attention heads track answer regions.

    Parameters
    ----------
    threshold : float, default=0.5
        Normalized-score cutoff; heads strictly above it are kept.
    per_layer : bool, default=False
        Min-max normalize scores within each layer instead of globally.

    Attributes
    ----------
    matrix_ : HeadScoreMatrix
        Raw and normalized per-head scores after :meth:`fit`.
    expert_heads_ : ExpertHeadSet
        The retained heads after :meth:`fit`.
    """

    def __init__(self, threshold: float = 0.5, per_layer: bool = False):
        self.threshold = threshold
        self.per_layer = per_layer

    def fit(self, corpus: DiagnosticCorpus, y=None) -> "HeadProfiler":
        if not isinstance(corpus, DiagnosticCorpus):
            raise ValidationError(
                f"fit expects a DiagnosticCorpus, got {type(corpus).__name__}"
            )
        self.matrix_, self.expert_heads_ = profile_corpus(
            corpus, self.threshold, per_layer=self.per_layer
        )
        self.score_matrix_ = self.matrix_.normalized
        return self

    def transform(self, corpus: DiagnosticCorpus) -> np.ndarray:
        """Normalized score matrix of the fitted corpus."""
        _check_fitted(self, "matrix_")
        return self.matrix_.normalized

    def fit_transform(self, corpus: DiagnosticCorpus, y=None) -> np.ndarray:
        return self.fit(corpus).transform(corpus)


class GuidanceMapper(BaseEstimator):
    """Map inference records to crop guidance using a fixed expert set.

    Parameters mirror the pipeline knobs; see
    :class:`havc.guidance.GuidanceParams` for semantics.
    """

    def __init__(
        self,
        alpha: float = 0.4,
        top_k: int = 8,
        temperature: float = 0.1,
        entropy_threshold: float = 0.3,
        component_weight: float = 0.25,
        dispersion_weight: float = 0.75,
        norm_scope: str = "survivors",
        otsu_bins: int = 256,
        connectivity: int = 8,
        box_threshold: float = 0.5,
        box_pad: int = 1,
        box_min_side: int = 2,
    ):
        self.alpha = alpha
        self.top_k = top_k
        self.temperature = temperature
        self.entropy_threshold = entropy_threshold
        self.component_weight = component_weight
        self.dispersion_weight = dispersion_weight
        self.norm_scope = norm_scope
        self.otsu_bins = otsu_bins
        self.connectivity = connectivity
        self.box_threshold = box_threshold
        self.box_pad = box_pad
        self.box_min_side = box_min_side

    def _params(self):
        from .config import RunConfig

        return RunConfig(
            alpha=self.alpha,
            top_k=self.top_k,
            temperature=self.temperature,
            entropy_threshold=self.entropy_threshold,
            component_weight=self.component_weight,
            dispersion_weight=self.dispersion_weight,
            norm_scope=self.norm_scope,
            otsu_bins=self.otsu_bins,
            connectivity=self.connectivity,
            box_threshold=self.box_threshold,
            box_pad=self.box_pad,
            box_min_side=self.box_min_side,
        ).guidance_params()

    def fit(self, expert_heads: ExpertHeadSet, y=None) -> "GuidanceMapper":
        if not isinstance(expert_heads, ExpertHeadSet):
            raise ValidationError(
                f"fit expects an ExpertHeadSet, got {type(expert_heads).__name__}"
            )
        if len(expert_heads) == 0:
            raise ValidationError("expert head set is empty")
        self._params()
        self.expert_heads_ = expert_heads
        return self

    def predict(self, records) -> list[GuidanceResult]:
        """Run the guidance pipeline on one record or a list of records."""
        _check_fitted(self, "expert_heads_")
        single = isinstance(records, InferenceRecord)
        batch = [records] if single else list(records)
        params = self._params()
        results = [run_pipeline(self.expert_heads_, r, params) for r in batch]
        return results

    def transform(self, records) -> list[GuidanceResult]:
        return self.predict(records)
