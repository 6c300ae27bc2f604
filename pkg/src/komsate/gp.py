"""Empirical-Bayes tuning of kernel hyperparameters.

Each arm's outcomes are modelled as a zero-mean Gaussian process (after
centering by the arm mean) with kernel ``K_t`` plus Gaussian noise of
standard deviation ``lambda_t``. The tuned noise variance doubles as the
conditional-variance plug-in ``sigma_i^2 = lambda_{T_i}^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .data import Dataset, StudentizedView
from .kernels import Hyperparams, KernelSpec, gram_parts

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)

N_RESTARTS = 5
MAX_ITER = 200
GRAD_TOL = 1e-5


class NonPDError(np.linalg.LinAlgError):
    def __init__(self, jitter: float):
        super().__init__(f"covariance not positive definite even with jitter {jitter:.3e}")
        self.jitter = jitter


class InsufficientDataError(ValueError):
    pass


def cholesky_jittered(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-4 of the trace."""
    try:
        return linalg.cholesky(C, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    tr = float(np.trace(C))
    if not np.isfinite(tr) or tr <= 0:
        raise NonPDError(0.0)
    jitter = 1e-10 * tr
    while jitter <= 1e-4 * tr * (1 + 1e-9):
        try:
            return linalg.cholesky(C + jitter * np.eye(C.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NonPDError(jitter / 10.0)


def log_marginal_likelihood(spec: KernelSpec, Z: np.ndarray, y: np.ndarray):
    """GP evidence and its gradient w.r.t. ``(log gamma, log theta, log lambda)``."""
    y = np.asarray(y, dtype=float)
    m = y.shape[0]
    K, dK_theta = gram_parts(spec, np.asarray(Z, dtype=float))
    lam2 = spec.params.lam**2
    C = K + lam2 * np.eye(m)
    L = cholesky_jittered(C)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * m * LOG2PI
    Cinv, info = linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise NonPDError(0.0)
    Cinv = np.tril(Cinv) + np.tril(Cinv, -1).T
    A = np.outer(alpha, alpha) - Cinv
    grad = 0.5 * np.array([
        np.sum(A * K),
        np.sum(A * dK_theta),
        2.0 * lam2 * np.trace(A),
    ])
    return float(value), grad


@dataclass(frozen=True)
class ArmFit:
    params: Hyperparams
    logml: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class TuneResult:
    params_treated: Hyperparams
    params_control: Hyperparams
    logml_treated: float
    logml_control: float
    iterations: int
    converged: bool

    def params(self, t: int) -> Hyperparams:
        return self.params_treated if t == 1 else self.params_control

    def sigma_sq(self, T: np.ndarray) -> np.ndarray:
        """Per-unit conditional variance plug-in ``lambda_{T_i}^2``."""
        T = np.asarray(T)
        return np.where(T == 1, self.params_treated.lam**2, self.params_control.lam**2)

    def as_dict(self) -> dict:
        return {
            "treated": {**self.params_treated.as_dict(), "logml": self.logml_treated},
            "control": {**self.params_control.as_dict(), "logml": self.logml_control},
            "iterations": self.iterations,
            "converged": self.converged,
        }


def tune_arm(
    template: KernelSpec,
    Z: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    n_restarts: int = N_RESTARTS,
    max_iter: int = MAX_ITER,
    center: bool = True,
) -> ArmFit:
    y = np.asarray(y, dtype=float)
    m, p = Z.shape
    if m < 2:
        raise InsufficientDataError(f"need at least 2 outcome-bearing units per arm, got {m}")
    if center:
        y = y - y.mean()
    var = float(y.var())
    sd = np.sqrt(var)
    lam_floor = 1e-6 * sd if sd > 0 else 1e-6
    g0 = var if var > 0 else 1.0
    init = np.log([g0, 1.0 / p, np.sqrt(0.5 * g0)])
    bounds = [(-30.0, 30.0), (-20.0, 12.0), (np.log(lam_floor), 30.0)]

    def negll(logp):
        try:
            v, g = log_marginal_likelihood(template.with_params(Hyperparams.from_log(logp)), Z, y)
        except (NonPDError, ValueError, FloatingPointError):
            return 1e300, np.zeros(3)
        if not np.isfinite(v):
            return 1e300, np.zeros(3)
        return -v, -g

    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [np.clip(init, lo, hi)]
    for _ in range(n_restarts):
        starts.append(np.clip(init + rng.uniform(np.log(1e-2), np.log(1e2), size=3), lo, hi))

    best_x, best_f, best_conv = None, np.inf, False
    iterations = 0
    for x0 in starts:
        f0, _ = negll(x0)
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(
                negll, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": max_iter, "gtol": 1e-6, "ftol": 1e-12},
            )
        iterations += int(res.nit)
        x, f = res.x, float(res.fun)
        if f > f0:
            x, f = x0, f0
        _, g = negll(x)
        # projected gradient: components pushing against an active bound do not count
        at_lo = (x <= lo + 1e-9) & (g > 0)
        at_hi = (x >= hi - 1e-9) & (g < 0)
        pg = np.where(at_lo | at_hi, 0.0, g)
        conv = bool(np.linalg.norm(pg) < GRAD_TOL)
        if f < best_f:
            best_x, best_f, best_conv = x, f, conv
    if best_x is None or not np.isfinite(best_f) or best_f >= 1e300:
        raise NonPDError(1e-4)
    return ArmFit(Hyperparams.from_log(best_x), -best_f, iterations, best_conv)


def tune(
    data: Dataset,
    view: StudentizedView,
    template: KernelSpec,
    seed: int = 0,
    n_restarts: int = N_RESTARTS,
    max_iter: int = MAX_ITER,
) -> TuneResult:
    """Maximize the GP log marginal likelihood separately in each arm."""
    Y = data.outcome()
    rng = np.random.default_rng(seed)
    fits = {}
    for t in (1, 0):
        idx = data.arm(t)
        fits[t] = tune_arm(template, view.Z[idx], Y[idx], rng, n_restarts, max_iter)
        if not fits[t].converged:
            log.info("arm %d: tuning stopped before gradient tolerance", t)
    return TuneResult(
        fits[1].params, fits[0].params, fits[1].logml, fits[0].logml,
        fits[1].iterations + fits[0].iterations, fits[1].converged and fits[0].converged,
    )
