"""Self-normalized tests of relevant hypotheses for functional time series.

Mean functions of sparsely or densely observed curves are estimated by
B-spline least squares; the deviation of interest (a mean, a difference of
means, or the jumps at change points) is tested against a relevance
threshold ``delta`` with a self-normalizer built from prefix fits, so no
long-run covariance has to be estimated.
"""
from relsn._backend import BACKEND
from relsn.changepoint import ChangePointEstimate, Segmentation, binary_segmentation, estimate_single
from relsn.errors import (
    CacheMiss,
    CorruptTableError,
    DomainError,
    IllConditionedDesignError,
    InsufficientPrefixError,
    InsufficientSegmentError,
    RelsnError,
    SpecMismatchError,
)
from relsn.pivotal import NormalizerKind, PivotalConfig, PivotalTable, get_table, quantile
from relsn.procedures import (
    TestReport,
    TestSpec,
    changepoint_test,
    multi_changepoint_test,
    one_sample_test,
    two_sample_test,
)
from relsn.spline_core import (
    Curve,
    FunctionalSample,
    SplineFit,
    SplineSpec,
    fit_mean,
    fit_partial_mean,
    select_knots_bic,
)

__all__ = [
    "BACKEND",
    "CacheMiss",
    "ChangePointEstimate",
    "CorruptTableError",
    "Curve",
    "DomainError",
    "FunctionalSample",
    "IllConditionedDesignError",
    "InsufficientPrefixError",
    "InsufficientSegmentError",
    "NormalizerKind",
    "PivotalConfig",
    "PivotalTable",
    "RelsnError",
    "Segmentation",
    "SpecMismatchError",
    "SplineFit",
    "SplineSpec",
    "TestReport",
    "TestSpec",
    "binary_segmentation",
    "changepoint_test",
    "estimate_single",
    "fit_mean",
    "fit_partial_mean",
    "get_table",
    "multi_changepoint_test",
    "one_sample_test",
    "quantile",
    "select_knots_bic",
    "two_sample_test",
]

__version__ = "0.1.0"
