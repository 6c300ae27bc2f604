"""Kernel optimal matching weights for sample average treatment effects."""

__version__ = "0.1.0"

from .data import Dataset, load_csv, studentize
from .estimators import (
    EstimateResult,
    fit_propensity,
    iptw_estimate,
    iptw_weights,
    regression_adjustment,
    sbw_weights,
    truncate_weights,
    wls_sate,
)
from .gp import TuneResult, log_marginal_likelihood, tune
from .kernels import Hyperparams, KernelSpec, gram
from .kom import WeightSolution, kom_weights, solve_weights
from .qp import QpProblem, QpSolution
from .qp import solve as solve_qp

__all__ = [
    "Dataset", "load_csv", "studentize",
    "EstimateResult", "fit_propensity", "iptw_estimate", "iptw_weights",
    "regression_adjustment", "sbw_weights", "truncate_weights", "wls_sate",
    "TuneResult", "log_marginal_likelihood", "tune",
    "Hyperparams", "KernelSpec", "gram",
    "WeightSolution", "kom_weights", "solve_weights",
    "QpProblem", "QpSolution", "solve_qp",
]
