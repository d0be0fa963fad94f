"""Joint longitudinal-survival modeling with dynamic risk prediction."""

from .basis import SplineBasis, default_knots
from .cohort import Cohort, SubjectRecord, build_cohort, read_cohort_csv, \
    write_cohort_csv
from .consensus import SplitPlan, consensus_fit
from .dynpred import predict_curve, predict_risk
from .errors import ConfigError, ConvergenceError, DataError
from .hazard import LinkSpec
from .inference import FitResult, MCMCConfig, Priors, fit
from .model import ModelSpec
from .simulate import SimConfig, simulate_cohort

__version__ = "0.1.0"

__all__ = [
    "Cohort", "ConfigError", "ConvergenceError", "DataError", "FitResult",
    "LinkSpec", "MCMCConfig", "ModelSpec", "Priors", "SimConfig",
    "SplineBasis", "SplitPlan", "SubjectRecord", "build_cohort",
    "consensus_fit", "default_knots", "fit", "predict_curve", "predict_risk",
    "read_cohort_csv", "simulate_cohort", "write_cohort_csv",
]
