"""Kernel optimal matching weights for the sample average treatment effect.

The weights minimize the worst-case conditional MSE

    Delta_1^2(w) + Delta_0^2(w) + sum_i w_i^2 sigma_i^2,

with ``Delta_t^2(w) = (I_t w - e)' K_t (I_t w - e)`` and ``e = 1/n``, over
nonnegative weights summing to one within each arm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import qp
from .data import Dataset, StudentizedView, studentize
from .gp import TuneResult, tune
from .kernels import Hyperparams, KernelSpec, gram

EXCLUDED_TERM_NOTE = (
    "covariance term between observed outcome and individual effect omitted; "
    "bounded by 4*sigma_max^2/n for per-arm normalized weights"
)


def worst_case_discrepancy_sq(K: np.ndarray, w: np.ndarray, T: np.ndarray, t: int) -> float:
    """``(I_t w - e)' K (I_t w - e)``, clipped at zero."""
    T = np.asarray(T)
    v = np.where(T == t, w, 0.0) - 1.0 / T.size
    val = float(v @ K @ v)
    return max(val, 0.0) if val > -1e-10 * max(1.0, abs(float(np.trace(K)))) else val


def moment_discrepancy(w: np.ndarray, T: np.ndarray, fvals: np.ndarray, t: int) -> float:
    """``B_t(w; f) = sum_i (1[T_i = t] w_i - 1/n) f(X_i)``."""
    T = np.asarray(T)
    return float(np.sum((np.where(T == t, w, 0.0) - 1.0 / T.size) * fvals))


def assemble(K1: np.ndarray, K0: np.ndarray, sigma_sq: np.ndarray, T: np.ndarray,
             s: float = 1.0) -> qp.QpProblem:
    """Build ``Q = I1 K1 I1 + I0 K0 I0 + diag(sigma^2)`` and ``c = (K1 I1 + K0 I0)' e``."""
    T = np.asarray(T)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    n = T.size
    if K1.shape != (n, n) or K0.shape != (n, n) or sigma_sq.shape != (n,):
        raise ValueError(
            f"dimension mismatch: K1 {K1.shape}, K0 {K0.shape}, sigma_sq {sigma_sq.shape}, n={n}"
        )
    if np.any(sigma_sq < 0):
        raise ValueError("conditional variances must be nonnegative")
    t1 = (T == 1).astype(float)
    t0 = 1.0 - t1
    Q = np.outer(t1, t1) * K1 + np.outer(t0, t0) * K0
    Q[np.diag_indices(n)] += sigma_sq
    e = np.full(n, 1.0 / n)
    c = t1 * (K1 @ e) + t0 * (K0 @ e)
    return qp.QpProblem(Q, c, T, s)


@dataclass(frozen=True)
class WeightSolution:
    w: np.ndarray
    delta1_sq: float
    delta0_sq: float
    variance_term: float
    objective: float  # raw solver objective plus the dropped constant
    raw_objective: float
    solver: qp.QpSolution = field(repr=False)
    tuning: Optional[TuneResult] = None
    specs: tuple = ()
    sigma_sq: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.solver.converged

    def diagnostics(self) -> dict:
        out = {
            "delta1_sq": self.delta1_sq,
            "delta0_sq": self.delta0_sq,
            "variance_term": self.variance_term,
            "objective": self.objective,
            "raw_solver_objective": self.raw_objective,
            "solver": {
                "iterations": self.solver.iterations,
                "kkt_residual": self.solver.kkt_residual,
                "converged": self.solver.converged,
                "jitter": self.solver.jitter,
            },
            "excluded_terms": EXCLUDED_TERM_NOTE,
        }
        if self.specs:
            out["kernel"] = {"family": self.specs[0].family, "degree": self.specs[0].degree}
            out["hyperparams"] = {
                "treated": self.specs[1].params.as_dict(),
                "control": self.specs[0].params.as_dict(),
            }
        if self.tuning is not None:
            out["tuning"] = self.tuning.as_dict()
        return out


def decompose(K1: np.ndarray, K0: np.ndarray, sigma_sq: np.ndarray, T: np.ndarray,
              w: np.ndarray) -> tuple:
    """Return ``(Delta_1^2, Delta_0^2, sum w^2 sigma^2)`` for given weights."""
    return (
        worst_case_discrepancy_sq(K1, w, T, 1),
        worst_case_discrepancy_sq(K0, w, T, 0),
        float(np.sum(w * w * sigma_sq)),
    )


def solve_weights(K1, K0, sigma_sq, T, tol=1e-8, max_iter=50000) -> WeightSolution:
    """Solve the KOM program for given Gram matrices and variances."""
    T = np.asarray(T)
    for t in (0, 1):
        if np.count_nonzero(T == t) == 1:
            warnings.warn(f"arm {t} has a single unit; its weight is forced to 1", stacklevel=2)
    prob = assemble(K1, K0, sigma_sq, T)
    sol = qp.solve(prob, tol=tol, max_iter=max_iter)
    d1, d0, var = decompose(K1, K0, sigma_sq, T, sol.w)
    # the solver drops the weight-independent constant e'K_1e + e'K_0e
    n = T.size
    constant = (K1.sum() + K0.sum()) / n**2
    return WeightSolution(
        sol.w, d1, d0, var, sol.objective + constant, sol.objective, sol,
        sigma_sq=np.asarray(sigma_sq),
    )


def kom_weights(
    data: Dataset,
    template: KernelSpec = KernelSpec("polynomial", 3),
    tuned: Optional[TuneResult] = None,
    params: Optional[Sequence[Hyperparams]] = None,
    sigma_sq: Optional[np.ndarray] = None,
    view: Optional[StudentizedView] = None,
    mode: str = "full",
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 50000,
) -> WeightSolution:
    """End-to-end KOM: studentize, tune (unless ``params`` given), assemble and solve.

    ``params`` is a ``(treated, control)`` pair of hyperparameters. When
    ``sigma_sq`` is omitted the variance plug-in is ``lambda_{T_i}^2``.
    """
    if view is None:
        view = studentize(data, mode)
    if params is None:
        if tuned is None:
            tuned = tune(data, view, template, seed=seed)
        params = (tuned.params_treated, tuned.params_control)
    p1, p0 = params
    spec1 = template.with_params(p1)
    spec0 = template.with_params(p0)
    K1 = gram(spec1, view.Z)
    K0 = gram(spec0, view.Z)
    if sigma_sq is None:
        sigma_sq = np.where(data.T == 1, p1.lam**2, p0.lam**2)
    sigma_sq = np.broadcast_to(np.asarray(sigma_sq, dtype=float), (data.n,)).copy()
    sol = solve_weights(K1, K0, sigma_sq, data.T, tol=tol, max_iter=max_iter)
    return WeightSolution(
        sol.w, sol.delta1_sq, sol.delta0_sq, sol.variance_term, sol.objective,
        sol.raw_objective, sol.solver, tuned, (spec0, spec1), sigma_sq,
    )


def bias_identity_check(
    w: np.ndarray,
    f1: Callable[[np.ndarray], np.ndarray],
    f0: Callable[[np.ndarray], np.ndarray],
    data: Dataset,
    sigma: float | np.ndarray = 1.0,
    draws: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    chunk: int = 10_000,
):
    """Monte Carlo conditional bias of the weighted estimator against its closed form.

    Outcomes are drawn as ``Y_i = f_{T_i}(X_i) + sigma_i * eps_i`` with
    ``X`` and ``T`` held fixed. Returns ``(lhs, rhs, mc_se)`` where ``lhs`` is
    the average of ``tau_hat - CSATE`` over draws and
    ``rhs = B_1(w; f_1) - B_0(w; f_0)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    X, T = data.X, data.T
    v1 = np.asarray(f1(X), dtype=float)
    v0 = np.asarray(f0(X), dtype=float)
    csate = float(np.mean(v1 - v0))
    mean_y = np.where(T == 1, v1, v0)
    sign_w = np.asarray(w, dtype=float) * (2.0 * T - 1.0)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), T.shape)
    errs = np.empty(draws)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        Y = mean_y + sig * rng.standard_normal((m, T.size))
        errs[done:done + m] = Y @ sign_w - csate
        done += m
    lhs = float(errs.mean())
    se = float(errs.std(ddof=1) / np.sqrt(draws))
    rhs = moment_discrepancy(w, T, v1, 1) - moment_discrepancy(w, T, v0, 0)
    return lhs, rhs, se
