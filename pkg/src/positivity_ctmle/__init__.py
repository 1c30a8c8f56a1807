"""Adaptive propensity-score truncation for average treatment effect estimation."""

from .estimators import (
    AteEstimate,
    Dataset,
    OutcomeFit,
    OutcomeScaling,
    aipw,
    hajek_ipw,
    initial_outcome_fit,
    ipw,
    tmle_estimate,
)
from .selectors import ctmle_select, cv_select_gamma, generate_candidates, mv_select_gamma
from .simulation import DgpConfig, run_replications, sample_dataset
from .truncation import empirical_quantile, make_grid, truncate_upper

__version__ = "0.1.0"

__all__ = [
    "AteEstimate",
    "Dataset",
    "DgpConfig",
    "OutcomeFit",
    "OutcomeScaling",
    "aipw",
    "ctmle_select",
    "cv_select_gamma",
    "empirical_quantile",
    "generate_candidates",
    "hajek_ipw",
    "initial_outcome_fit",
    "ipw",
    "make_grid",
    "mv_select_gamma",
    "run_replications",
    "sample_dataset",
    "tmle_estimate",
    "truncate_upper",
]
