"""Effect estimation from weights, plus the IPTW-family, RA and SBW baselines."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from . import qp
from .data import Dataset, studentize

Z975 = 1.959963984540054
P_CLIP = 1e-6


class EstimationError(ValueError):
    pass


class SbwInfeasibleError(EstimationError):
    def __init__(self, msg: str, moment: str, violation: float):
        super().__init__(msg)
        self.moment = moment
        self.violation = violation


@dataclass(frozen=True)
class EstimateResult:
    tau_hat: float
    se: float
    method: str = "wls"
    flags: dict = field(default_factory=dict)

    @property
    def ci_low(self) -> float:
        return self.tau_hat - Z975 * self.se

    @property
    def ci_high(self) -> float:
        return self.tau_hat + Z975 * self.se

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "flags": self.flags,
        }


def wls_sate(data: Dataset, w: np.ndarray, method: str = "wls") -> EstimateResult:
    """Weighted least squares of Y on (1, T) with an HC0 sandwich standard error.

    Weights are treated as fixed. The treatment coefficient equals the
    difference of per-arm weighted means.
    """
    Y = data.outcome()
    w = np.asarray(w, dtype=float)
    T = data.T.astype(float)
    if np.any(w < 0):
        raise EstimationError("weights must be nonnegative")
    w = w.copy()
    for t in (0, 1):
        m = data.T == t
        tot = w[m].sum()
        if not tot > 0:
            raise EstimationError(f"arm {t} has zero total weight")
        # exact no-op for the (1, T) design; keeps the normal equations well scaled
        w[m] /= tot
    D = np.column_stack([np.ones_like(T), T])
    DW = D * w[:, None]
    bread = np.linalg.inv(D.T @ DW)
    beta = bread @ (DW.T @ Y)
    resid = Y - D @ beta
    meat = (DW * resid[:, None] ** 2).T @ DW
    cov = bread @ meat @ bread
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    return EstimateResult(float(beta[1]), se, method)


def monomials(Z: np.ndarray, degree: int, intercept: bool = True) -> tuple:
    """All monomials of the columns of ``Z`` up to ``degree``.

    Returns ``(matrix, names)``; column order is by total degree, then
    lexicographic in the variable indices.
    """
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    cols, names = [], []
    if intercept:
        cols.append(np.ones(n))
        names.append("1")
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(p), d):
            cols.append(np.prod(Z[:, combo], axis=1))
            names.append("*".join(f"z{j + 1}" for j in combo))
    return np.column_stack(cols), names


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray
    design_degree: int
    mu: np.ndarray
    whitener: np.ndarray
    converged: bool = True
    separated: bool = False
    iterations: int = 0

    def design(self, X: np.ndarray) -> np.ndarray:
        return monomials((np.asarray(X, dtype=float) - self.mu) @ self.whitener, self.design_degree)[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        e = special.expit(self.design(X) @ self.coefficients)
        return np.clip(e, P_CLIP, 1.0 - P_CLIP)


def fit_propensity(data: Dataset, degree: int = 1, ridge: float = 1e-8,
                   max_iter: int = 100, tol: float = 1e-8) -> PropensityModel:
    """Logistic regression of T on monomials of studentized X via IRLS.

    A tiny ridge on non-intercept coefficients keeps the Newton system
    invertible. Under (quasi-)separation the fit is returned with
    ``separated=True``; its probabilities are clipped downstream.
    """
    view = studentize(data, "diagonal")
    D, _ = monomials(view.Z, degree)
    T = data.T.astype(float)
    k = D.shape[1]
    pen = np.full(k, ridge)
    pen[0] = 0.0

    def penalized_ll(b):
        eta = D @ b
        return float(np.sum(T * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(pen * b * b))

    beta = np.zeros(k)
    ll = penalized_ll(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = special.expit(D @ beta)
        W = np.maximum(p * (1.0 - p), 1e-12)
        H = (D * W[:, None]).T @ D + np.diag(pen) + 1e-12 * np.eye(k)
        g = D.T @ (T - p) - pen * beta
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # step halving keeps the penalized likelihood monotone
        for _ in range(30):
            new_ll = penalized_ll(beta + step)
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        beta = beta + step
        ll = new_ll
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    raw = special.expit(D @ beta)
    separated = bool(np.any(raw < P_CLIP) or np.any(raw > 1.0 - P_CLIP)) or not converged
    return PropensityModel(beta, degree, view.mu_hat, view.whitener, converged, separated, it)


def iptw_weights(model: PropensityModel, data: Dataset) -> np.ndarray:
    """``T/e + (1-T)/(1-e)`` on clipped propensities, unnormalized."""
    e = model.predict(data.X)
    T = data.T
    return np.where(T == 1, 1.0 / e, 1.0 / (1.0 - e))


def truncate_weights(w: np.ndarray, lower_pct: float = 1.0, upper_pct: float = 99.0) -> np.ndarray:
    """Clamp weights to the given percentiles of their own distribution."""
    if not 0 <= lower_pct < upper_pct <= 100:
        raise ValueError("need 0 <= lower < upper <= 100")
    w = np.asarray(w, dtype=float)
    lo, hi = np.percentile(w, [lower_pct, upper_pct])
    return np.clip(w, lo, hi)


def _ra_tau(D: np.ndarray, Y: np.ndarray, T: np.ndarray):
    preds = []
    short = False
    for t in (1, 0):
        m = T == t
        if m.sum() < D.shape[1]:
            short = True
        coef = np.linalg.lstsq(D[m], Y[m], rcond=None)[0]
        preds.append(D @ coef)
    return float(np.mean(preds[0] - preds[1])), short


def regression_adjustment(data: Dataset, degree: int = 1, n_boot: int = 200,
                          seed: int = 0) -> EstimateResult:
    """Contrast of arm-specific polynomial regression predictions, bootstrap SE.

    Rank-deficient arms get the minimum-norm least-squares fit and the
    result is flagged.
    """
    Y = data.outcome()
    view = studentize(data, "diagonal")
    D, _ = monomials(view.Z, degree)
    T = data.T
    tau, short = _ra_tau(D, Y, T)
    rng = np.random.default_rng(seed)
    boots = []
    n = data.n
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        Tb = T[idx]
        if Tb.min() == Tb.max():
            continue
        boots.append(_ra_tau(D[idx], Y[idx], Tb)[0])
    se = float(np.std(boots, ddof=1)) if len(boots) > 1 else float("inf")
    flags = {"rank_deficient_arm": True} if short else {}
    return EstimateResult(tau, se, f"ra{degree}", flags)


@dataclass(frozen=True)
class SbwSolution:
    w: np.ndarray
    tol: float
    escalations: int
    max_violation: float
    converged: bool


def _balance_system(data: Dataset, degree: int):
    """Rows of ``A w - b`` are weighted arm means minus full-sample means, in SD units."""
    view = studentize(data, "diagonal")
    M, names = monomials(view.Z, degree, intercept=False)
    sd = M.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    M = (M - M.mean(axis=0)) / sd
    T = data.T
    rows, labels = [], []
    for t in (1, 0):
        mask = (T == t).astype(float)
        for j, name in enumerate(names):
            rows.append(mask * M[:, j])
            labels.append(f"{name} (arm {t})")
    A = np.array(rows)
    return A, np.zeros(A.shape[0]), labels


def _arm_sum_matrix(T: np.ndarray) -> np.ndarray:
    return np.vstack([(T == 1).astype(float), (T == 0).astype(float)])


def _feasible_point(A, b, T, tol):
    n = T.size
    Aub = np.vstack([A, -A])
    bub = np.concatenate([b + tol, tol - b])
    res = optimize.linprog(
        np.zeros(n), A_ub=Aub, b_ub=bub, A_eq=_arm_sum_matrix(T), b_eq=[1.0, 1.0],
        bounds=(0, None), method="highs",
    )
    return res.x if res.status == 0 else None


def _minimax_violation(A, b, T):
    """Smallest achievable max |A w - b| and the moment attaining it."""
    n = T.size
    k = A.shape[0]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    Aub = np.block([[A, -np.ones((k, 1))], [-A, -np.ones((k, 1))]])
    bub = np.concatenate([b, -b])
    Aeq = np.hstack([_arm_sum_matrix(T), np.zeros((2, 1))])
    res = optimize.linprog(c, A_ub=Aub, b_ub=bub, A_eq=Aeq, b_eq=[1.0, 1.0],
                           bounds=(0, None), method="highs")
    w = res.x[:n]
    viol = np.abs(A @ w - b)
    return float(res.x[-1]), int(np.argmax(viol))


def _sbw_dual(A, b, T, tol):
    """min ||w||^2 s.t. |A w - b| <= tol over the product simplex, via its dual.

    For multipliers ``nu`` (arm sums) and ``alpha, beta >= 0`` (upper and
    lower balance bounds) the inner minimizer is ``w = max(0, u/2)`` with
    ``u = E'nu - A'(alpha - beta)``; the dual is smooth and concave, so a
    bounded quasi-Newton method finds it quickly.
    """
    E = _arm_sum_matrix(T)
    k = A.shape[0]

    def primal(z):
        nu, a, c = z[:2], z[2:2 + k], z[2 + k:]
        u = E.T @ nu - A.T @ (a - c)
        return np.maximum(0.0, 0.5 * u), u

    def negdual(z):
        nu, a, c = z[:2], z[2:2 + k], z[2 + k:]
        w, u = primal(z)
        up = np.maximum(u, 0.0)
        g = -0.25 * up @ up + nu.sum() - a @ (b + tol) + c @ (b - tol)
        Aw = A @ w
        grad = np.concatenate([1.0 - E @ w, Aw - b - tol, b - Aw - tol])
        return -g, -grad

    z0 = np.zeros(2 + 2 * k)
    z0[:2] = 2.0 / np.maximum(E.sum(axis=1), 1.0)
    bounds = [(None, None)] * 2 + [(0.0, None)] * (2 * k)
    res = optimize.minimize(negdual, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
    w, _ = primal(res.x)
    for m in E.astype(bool):
        tot = w[m].sum()
        w[m] = w[m] / tot if tot > 0 else 1.0 / m.sum()
    viol = float(max(np.max(np.abs(A @ w - b)) - tol, 0.0))
    return w, viol, viol <= 1e-6


def sbw_fit(data: Dataset, degree: int = 1,
            tol_grid: Sequence[float] = (0.01, 0.1, 1.0)) -> SbwSolution:
    """Minimum-norm per-arm weights meeting approximate moment balance.

    Tolerances are tried in order until the balance constraints are
    feasible; feasibility is decided by a linear program before the
    quadratic solve.
    """
    T = data.T
    A, b, labels = _balance_system(data, degree)
    for i, tol in enumerate(tol_grid):
        if not np.isfinite(tol):
            return SbwSolution(qp.uniform_point(T), float(tol), i, 0.0, True)
        if _feasible_point(A, b, T, tol) is None:
            continue
        # uniform weights may already be balanced enough
        u = qp.uniform_point(T)
        if np.max(np.abs(A @ u - b)) <= tol:
            return SbwSolution(u, float(tol), i, 0.0, True)
        w, viol, conv = _sbw_dual(A, b, T, tol)
        return SbwSolution(w, float(tol), i, viol, conv)
    best, j = _minimax_violation(A, b, T)
    raise SbwInfeasibleError(
        f"balance infeasible at every tolerance in {list(tol_grid)}; "
        f"tightest moment {labels[j]} cannot get below {best:.4g}",
        labels[j], best,
    )


def sbw_weights(data: Dataset, degree: int = 1,
                tol_grid: Sequence[float] = (0.01, 0.1, 1.0)) -> np.ndarray:
    return sbw_fit(data, degree, tol_grid).w


def iptw_estimate(data: Dataset, degree: int = 1, truncate: Optional[tuple] = None) -> EstimateResult:
    model = fit_propensity(data, degree)
    w = iptw_weights(model, data)
    label = f"iptw{degree}"
    if truncate is not None:
        w = truncate_weights(w, *truncate)
        label = f"tiptw{degree}"
    res = wls_sate(data, w, label)
    flags = {"separated": True} if model.separated else {}
    return EstimateResult(res.tau_hat, res.se, label, flags)
