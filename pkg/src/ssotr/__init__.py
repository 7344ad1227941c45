"""Optimal linear treatment regimes from partially labeled data."""

__version__ = "0.1.0"

from .data_model import Dataset, Observation, augment, load_csv, standardize, write_csv
from .errors import DataError, EmptyArmError, NumericalError, RankDeficientError, SeparationError, SSOTRError
from .estimators import (
    DecisionRule,
    RegimeFit,
    decide,
    estimate,
    fit_np,
    fit_ss,
    fit_tr,
    refit_theta,
    transformed_response,
    wald_ci,
)
from .kernel_regression import QSurface, contrast_np, fit_folded, fit_surface, nw_q, select_bandwidth
from .propensity import PropensityFit, evaluate, fit_propensity
from .simulation import SimConfig, SimReport, TruthSet, compute_truth, generate_replication, pcd, run_study, value_of_rule
