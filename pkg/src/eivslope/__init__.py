"""Slope estimation in the functional errors-in-variables model with replicated regressors."""

from .canonical import (
    CanonicalStats,
    DataError,
    DegenerateStatsError,
    RepeatedMeasuresSample,
    SufficientStats,
    canonicalize,
    helmert_q,
    load_csv,
    stats_from_sample,
    sufficient_stats,
)
from .estimators import EstimateResult, PhiPolySpec, PsiSpec, estimate, resolve

__version__ = "0.1.0"
