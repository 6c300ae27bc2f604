"""Convex QPs over a product of two scaled simplices.

The feasible set is ``{w >= 0, sum_{T=1} w = s, sum_{T=0} w = s}``. The
solver is an accelerated projected gradient method (monotone, with adaptive
restart) whose projection step splits into two exact simplex projections.
Quadratic problems additionally get an equality-constrained polish on the
detected support, which pins the solution down to machine precision once
the active set has been identified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

POWER_STEPS = 50
L_SAFETY = 1.05


@dataclass(frozen=True)
class QpProblem:
    """minimize ``w'Qw - 2c'w`` over the product simplex defined by ``T`` and ``s``."""

    Q: np.ndarray
    c: np.ndarray
    T: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        c = np.asarray(self.c, dtype=float)
        T = np.asarray(self.T).astype(np.int8)
        n = c.shape[0]
        if Q.shape != (n, n) or T.shape != (n,):
            raise ValueError(f"dimension mismatch: Q {Q.shape}, c {c.shape}, T {T.shape}")
        scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
        if np.abs(Q - Q.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("Q is not symmetric")
        if not np.all(np.isin(T, (0, 1))):
            raise ValueError("T must be binary")
        if not (T == 1).any() or not (T == 0).any():
            raise ValueError("both arms must be nonempty")
        if not self.s > 0:
            raise ValueError("per-arm sum target must be positive")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "T", T)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def objective(self, w: np.ndarray) -> float:
        return float(w @ self.Q @ w - 2.0 * self.c @ w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return 2.0 * (self.Q @ w - self.c)


@dataclass(frozen=True)
class QpSolution:
    w: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    jitter: float = 0.0
    history: Optional[np.ndarray] = field(default=None, repr=False)


def project_simplex(v: np.ndarray, s: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = s}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.size == 1:
        return np.array([s], dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - s
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def project_product_simplex(v: np.ndarray, T: np.ndarray, s: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    T = np.asarray(T)
    out = np.empty_like(v)
    for t in (0, 1):
        m = T == t
        out[m] = project_simplex(v[m], s)
    return out


def uniform_point(T: np.ndarray, s: float = 1.0) -> np.ndarray:
    T = np.asarray(T)
    n1 = np.count_nonzero(T == 1)
    n0 = T.size - n1
    return np.where(T == 1, s / n1, s / n0).astype(float)


def stationarity_residual(w: np.ndarray, g: np.ndarray, T: np.ndarray, s: float) -> float:
    """Largest per-unit gap ``|w - P(w - grad)|``; zero exactly at a minimizer."""
    return float(np.abs(w - project_product_simplex(w - g, T, s)).max())


def lipschitz_estimate(Q: np.ndarray, steps: int = POWER_STEPS, seed: int = 0) -> float:
    """Largest eigenvalue of a PSD matrix by power iteration, padded by 5%."""
    n = Q.shape[0]
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(steps):
        y = Q @ x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 1e-12
        lam = float(x @ y)
        x = y / nrm
    lam = max(lam, float(np.linalg.norm(Q @ x)))
    return L_SAFETY * max(lam, 1e-12)


def minimize_product_simplex(
    fg: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    T: np.ndarray,
    s: float,
    L: float,
    tol: float = 1e-8,
    kkt_tol: float = 1e-6,
    max_iter: int = 50000,
    polish: Optional[Callable[[np.ndarray], Optional[np.ndarray]]] = None,
    polish_every: int = 100,
    record: bool = False,
):
    """Monotone accelerated projected gradient with adaptive restart.

    ``fg(x)`` returns ``(f(x), grad f(x))``. ``L`` is an initial Lipschitz
    estimate for the gradient; it is doubled whenever the quadratic upper
    bound fails. Returns ``(x, f, kkt, iterations, converged, history)``.
    """
    x = project_product_simplex(x0, T, s)
    fx, gx = fg(x)
    y, t = x.copy(), 1.0
    fy, gy = fx, gx
    history = [fx] if record else None
    kkt = stationarity_residual(x, gx, T, s)
    converged = kkt <= kkt_tol
    it = 0
    last_polish = -polish_every
    while not converged and it < max_iter:
        it += 1
        while True:
            x_new = project_product_simplex(y - gy / L, T, s)
            d = x_new - y
            f_new, g_new = fg(x_new)
            if f_new <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * (1.0 + abs(fy)):
                break
            L *= 2.0
        if f_new > fx:
            # function restart: drop momentum and step from the last accepted point
            y, t, fy, gy = x, 1.0, fx, gx
            continue
        dec = fx - f_new
        if (y - x_new) @ (x_new - x) > 0:
            t_next = 1.0
            y_next = x_new
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y_next = x_new + ((t - 1.0) / t_next) * (x_new - x)
        x, fx, gx = x_new, f_new, g_new
        t = t_next
        if y_next is x_new:
            y, fy, gy = x, fx, gx
        else:
            y = y_next
            fy, gy = fg(y)
        if record:
            history.append(fx)

        small_step = dec <= tol * max(1.0, abs(fx))
        if polish is not None and (
            it - last_polish >= polish_every or (small_step and it - last_polish >= 10)
        ):
            last_polish = it
            cand = polish(x)
            if cand is not None:
                fc, gc = fg(cand)
                if fc <= fx + 1e-12 * (1.0 + abs(fx)):
                    kc = stationarity_residual(cand, gc, T, s)
                    if kc <= kkt_tol:
                        x, fx, gx = cand, fc, gc
                        if record:
                            history.append(fx)
                        kkt, converged = kc, True
                        break
        if small_step:
            kkt = stationarity_residual(x, gx, T, s)
            if kkt <= kkt_tol:
                converged = True
    kkt = stationarity_residual(x, gx, T, s)
    converged = converged or kkt <= kkt_tol
    return x, fx, kkt, it, converged, (np.array(history) if record else None)


def _support_polish(prob: QpProblem, Q: np.ndarray):
    T, s, c = prob.T, prob.s, prob.c

    def polish(w: np.ndarray) -> Optional[np.ndarray]:
        support = w > 1e-12 * s
        for _ in range(5):
            idx = np.flatnonzero(support)
            k = idx.size
            arms = [np.flatnonzero(T[idx] == a) for a in (0, 1)]
            if any(a.size == 0 for a in arms):
                return None
            A = np.zeros((2, k))
            for r, a in enumerate(arms):
                A[r, a] = 1.0
            KKT = np.zeros((k + 2, k + 2))
            KKT[:k, :k] = 2.0 * Q[np.ix_(idx, idx)]
            KKT[:k, k:] = A.T
            KKT[k:, :k] = A
            rhs = np.concatenate([2.0 * c[idx], [s, s]])
            try:
                # a singular support system is expected for rank-deficient Q;
                # the candidate is only accepted if it lowers the objective
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    sol = linalg.solve(KKT, rhs, assume_a="sym", check_finite=False)
            except (linalg.LinAlgError, ValueError):
                sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
            ws = sol[:k]
            if not np.all(np.isfinite(ws)):
                return None
            if np.all(ws >= -1e-14 * s):
                out = np.zeros_like(w)
                out[idx] = np.maximum(ws, 0.0)
                # renormalize away rounding in the sums
                for a in (0, 1):
                    m = T == a
                    out[m] *= s / out[m].sum()
                return out
            support[idx[ws < 0]] = False
        return None

    return polish


def solve(prob: QpProblem, tol: float = 1e-8, max_iter: int = 50000,
          x0: Optional[np.ndarray] = None, record: bool = False) -> QpSolution:
    """Minimize ``w'Qw - 2c'w`` over the product simplex."""
    Q = prob.Q
    n = prob.n
    jitter = 0.0
    tr = float(np.trace(Q))
    lo = float(linalg.eigvalsh(Q, subset_by_index=[0, 0], check_finite=False)[0])
    if lo < -1e-8 * max(abs(tr), 1e-300):
        raise ValueError(f"Q is not positive semidefinite (min eigenvalue {lo:.3e})")
    if lo < 0:
        jitter = 1.01 * abs(lo)
        Q = Q + jitter * np.eye(n)
    c = prob.c

    def fg(w):
        Qw = Q @ w
        return float(w @ Qw - 2.0 * c @ w), 2.0 * (Qw - c)

    L = 2.0 * lipschitz_estimate(Q)
    start = uniform_point(prob.T, prob.s) if x0 is None else x0
    kkt_tol = 1e-6 * (1.0 + float(np.abs(c).max(initial=0.0)))
    w, f, kkt, it, conv, hist = minimize_product_simplex(
        fg, start, prob.T, prob.s, L, tol=tol, kkt_tol=kkt_tol, max_iter=max_iter,
        polish=_support_polish(prob, Q), record=record,
    )
    w = np.maximum(w, 0.0)
    return QpSolution(w, prob.objective(w), kkt, it, conv, jitter, hist)
