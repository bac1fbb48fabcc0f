"""Tuning Ridge and Lasso shrinkage by SURE and leave-one-out cross-validation."""

__version__ = "0.1.0"

from .cv import CvCurve, GapReport, cv_curve, cv_sure_gap, tune_cv
from .erm import (
    Dataset,
    InfluenceBundle,
    LossModel,
    fit_erm,
    fit_penalized,
    influence_estimate,
    loo_approx,
    loo_exact,
)
from .errors import (
    ConvergenceError,
    InvalidInputError,
    NonFiniteInputError,
    RankDeficientError,
    StudyAbortedError,
)
from .risk import (
    DgpSpec,
    McConfig,
    RiskEstimate,
    js_risk,
    js_risk_series,
    loss_distribution_compare,
    oos_regret,
    risk_cv,
    risk_sure_limit,
    simulate_dataset,
)
from .shrinkage import PenaltySpec, ProxResult, grad_g, prox
from .sure import (
    SegmentList,
    SureMinimum,
    lasso_breakpoints,
    minimize_sure,
    sawtooth_profile,
    supermodularity_gap,
    sure,
    sure_curve,
    well_separation,
)
