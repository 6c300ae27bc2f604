"""Monte Carlo comparison of KOM against IPTW-family, RA and SBW baselines.

Data come from the linear and nonlinear positivity-violation designs; the
misspecified variants hand the analyst transformed covariates instead of
the true ones. Every replication draws from its own generator keyed on
``(seed, scenario, beta index, replication)``, so results do not depend on
how replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import special

from .data import Dataset
from .estimators import (
    EstimateResult, iptw_estimate, regression_adjustment, sbw_weights, wls_sate,
)
from .kernels import KernelSpec
from .kom import kom_weights

SCENARIOS = ("correct_linear", "correct_nonlinear", "misspecified_linear", "misspecified_nonlinear")
SCENARIO_CODE = {name: i for i, name in enumerate(SCENARIOS)}
DEFAULT_DEGREE = {
    "correct_linear": 1,
    "correct_nonlinear": 2,
    "misspecified_linear": 3,
    "misspecified_nonlinear": 3,
}
CSV_HEADER = ("scenario", "method", "beta", "bias_sq", "mse", "coverage", "runtime", "failures")


class UnsupportedConfigError(ValueError):
    pass


def default_beta_grid() -> tuple:
    return tuple(float(b) for b in np.linspace(0.1, 3.0, 7))


# --------------------------------------------------------------------------
# data-generating processes


@dataclass(frozen=True)
class Truth:
    X: np.ndarray
    pi: np.ndarray
    Y0: np.ndarray
    Y1: np.ndarray
    alpha: float

    @property
    def sate(self) -> float:
        return float(np.mean(self.Y1 - self.Y0))


def _quadratic_part(X: np.ndarray) -> np.ndarray:
    # sum_k x_k^2 + sum over ordered pairs k != m of x_k x_m
    s = X.sum(axis=1)
    sq = np.sum(X * X, axis=1)
    return sq + (s * s - sq)


@lru_cache(maxsize=None)
def expected_treatment(design: str, K: int, beta: float, nodes: int = 201) -> float:
    """``E[expit(beta * score(X))]`` for standard normal ``X``.

    Both treatment scores depend on ``X`` only through ``s = sum_k x_k ~ N(0, K)``
    (the nonlinear score equals ``s + s^2``), so a one-dimensional
    Gauss-Hermite rule is exact to rounding.
    """
    z, wts = np.polynomial.hermite_e.hermegauss(nodes)
    s = np.sqrt(K) * z
    score = s if design == "linear" else s + s * s
    return float(np.sum(wts * special.expit(beta * score)) / np.sqrt(2.0 * np.pi))


def _generate(design: str, n: int, K: int, beta: float, delta: float, rng: np.random.Generator):
    X = rng.standard_normal((n, K))
    lin = X.sum(axis=1)
    if design == "linear":
        mean_part = lin
        score = lin
        alpha = -delta * expected_treatment("linear", K, float(beta))
    else:
        mean_part = lin + _quadratic_part(X)
        score = mean_part
        # E[sum x_k^2] = K, cross terms have mean zero
        alpha = -delta * expected_treatment("nonlinear", K, float(beta)) - K
    pi = special.expit(beta * score)
    T = (rng.random(n) < pi).astype(np.int8)
    noise = rng.standard_normal(n)
    # one noise draw per unit is shared by both potential outcomes
    Y0 = alpha + mean_part + noise
    Y1 = alpha + delta + mean_part + noise
    Y = np.where(T == 1, Y1, Y0)
    if T.min() == T.max():
        raise _EmptyArmDraw()
    data = Dataset(X, T, Y)
    return data, Truth(X, pi, Y0, Y1, alpha)


class _EmptyArmDraw(RuntimeError):
    pass


def gen_linear(n: int = 200, K: int = 2, beta: float = 1.0, delta: float = 1.0,
               rng: Optional[np.random.Generator] = None):
    """``Y = alpha + delta T + sum x + N(0,1)``, ``P(T=1) = expit(beta sum x)``."""
    rng = np.random.default_rng() if rng is None else rng
    return _generate("linear", n, K, beta, delta, rng)


def gen_nonlinear(n: int = 200, K: int = 2, beta: float = 1.0, delta: float = 1.0,
                  rng: Optional[np.random.Generator] = None):
    """Linear design plus squares and pairwise products in both mean and score."""
    rng = np.random.default_rng() if rng is None else rng
    return _generate("nonlinear", n, K, beta, delta, rng)


def misspecify(data: Dataset) -> Dataset:
    """Replace ``(X1, X2)`` by ``((2 + X1) / exp(X1), (X1 X2 / 25 + 1)^3)``."""
    if data.p != 2:
        raise UnsupportedConfigError(f"misspecification transform needs K=2, got {data.p}")
    x1, x2 = data.X[:, 0], data.X[:, 1]
    Z = np.column_stack([(2.0 + x1) / np.exp(x1), (x1 * x2 / 25.0 + 1.0) ** 3])
    return data.with_covariates(Z, ("z1", "z2"))


def generate(scenario: str, n: int, K: int, beta: float, delta: float, rng: np.random.Generator):
    """Draw one dataset for a named scenario, redrawing if an arm comes out empty."""
    design = "nonlinear" if scenario.endswith("nonlinear") else "linear"
    for _ in range(100):
        try:
            data, truth = _generate(design, n, K, beta, delta, rng)
            break
        except _EmptyArmDraw:
            continue
    else:
        raise RuntimeError("could not draw a sample with both arms present")
    if scenario.startswith("misspecified"):
        data = misspecify(data)
    return data, truth


# --------------------------------------------------------------------------
# methods


def _kom(data: Dataset, degree: int, seed: int) -> EstimateResult:
    sol = kom_weights(data, KernelSpec("polynomial", degree), mode="diagonal", seed=seed)
    res = wls_sate(data, sol.w, f"kom{degree}")
    flags = {} if sol.converged else {"solver_not_converged": True}
    return replace(res, flags=flags)


def _sbw(data: Dataset, degree: int, seed: int) -> EstimateResult:
    return wls_sate(data, sbw_weights(data, degree), f"sbw{degree}")


METHODS: Dict[str, Callable[[Dataset, int, int], EstimateResult]] = {
    "kom": _kom,
    "iptw": lambda data, degree, seed: iptw_estimate(data, degree),
    "tiptw": lambda data, degree, seed: iptw_estimate(data, degree, truncate=(1.0, 99.0)),
    "ra": lambda data, degree, seed: regression_adjustment(data, degree, seed=seed),
    "sbw": _sbw,
}


# --------------------------------------------------------------------------
# harness


@dataclass(frozen=True)
class SimConfig:
    scenario: str = "correct_linear"
    beta_grid: tuple = field(default_factory=default_beta_grid)
    n: int = 200
    K: int = 2
    delta: float = 1.0
    replications: int = 200
    seed: int = 20190401
    methods: tuple = ("kom", "iptw", "tiptw", "ra", "sbw")
    degree: Optional[int] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise UnsupportedConfigError(f"unknown scenario {self.scenario!r}")
        if self.scenario.startswith("misspecified") and self.K != 2:
            raise UnsupportedConfigError("misspecified scenarios are defined for K=2 only")
        if any(not b > 0 for b in self.beta_grid):
            raise UnsupportedConfigError("beta values must be positive")
        if self.replications < 1:
            raise UnsupportedConfigError("need at least one replication")
        for m in self.methods:
            if m not in METHODS and m != "oracle":
                raise UnsupportedConfigError(f"unknown method {m!r}")
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def model_degree(self) -> int:
        return self.degree if self.degree is not None else DEFAULT_DEGREE[self.scenario]

    @property
    def name(self) -> str:
        return self.label or self.scenario


@dataclass(frozen=True)
class SimCell:
    scenario: str
    method: str
    beta: float
    bias_sq: float
    mse: float
    coverage: float
    mean_runtime: float
    failures: int
    errors: np.ndarray = field(repr=False)
    covered: np.ndarray = field(repr=False)

    @property
    def mc_se_mean(self) -> float:
        e = self.errors
        return float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else float("nan")


@dataclass
class SimResult:
    cells: list = field(default_factory=list)
    pi_range: dict = field(default_factory=dict)

    def cell(self, method: str, beta: float, scenario: Optional[str] = None) -> SimCell:
        for c in self.cells:
            if c.method == method and abs(c.beta - beta) < 1e-12 and (scenario is None or c.scenario == scenario):
                return c
        raise KeyError((scenario, method, beta))

    def extend(self, other: "SimResult") -> "SimResult":
        self.cells.extend(other.cells)
        self.pi_range.update(other.pi_range)
        return self

    def to_csv(self, record_runtime: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in self.cells:
            w.writerow([
                c.scenario, c.method, repr(c.beta), repr(c.bias_sq), repr(c.mse),
                repr(c.coverage), repr(c.mean_runtime) if record_runtime else "", c.failures,
            ])
        return buf.getvalue()


def replication_rng(seed: int, scenario: str, beta_index: int, rep: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(SCENARIO_CODE[scenario], beta_index, rep))
    return np.random.default_rng(ss)


def _one_replication(cfg: SimConfig, beta_index: int, rep: int):
    rng = replication_rng(cfg.seed, cfg.scenario, beta_index, rep)
    beta = cfg.beta_grid[beta_index]
    data, truth = generate(cfg.scenario, cfg.n, cfg.K, beta, cfg.delta, rng)
    method_seed = int(rng.integers(2**31))
    sate = truth.sate
    out = {}
    for m in cfg.methods:
        t0 = time.perf_counter()
        try:
            if m == "oracle":
                res = EstimateResult(sate, 0.0, "oracle")
            else:
                res = METHODS[m](data, cfg.model_degree, method_seed)
            err = res.tau_hat - sate
            ok = bool(np.isfinite(err) and np.isfinite(res.se))
            out[m] = (err, bool(res.covers(sate)) if ok else False, time.perf_counter() - t0, ok)
        except Exception:  # counted, not fatal
            out[m] = (np.nan, False, time.perf_counter() - t0, False)
    return out, float(truth.pi.min()), float(truth.pi.max()), sate


def _limited_blas():
    from threadpoolctl import threadpool_limits
    return threadpool_limits(1)


def _worker_init():
    global _BLAS_LIMIT
    _BLAS_LIMIT = _limited_blas()


def _run_chunk(args):
    cfg, tasks = args
    return [(b, r, _one_replication(cfg, b, r)) for b, r in tasks]


def default_threads() -> int:
    env = os.environ.get("KOMSATE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run(config: SimConfig, threads: int = 1, progress: Optional[Callable[[int, int], None]] = None) -> SimResult:
    """Run all replications of one scenario over its beta grid."""
    nb, nr = len(config.beta_grid), config.replications
    tasks = [(b, r) for b in range(nb) for r in range(nr)]
    results = {}
    if threads <= 1:
        with _limited_blas():
            for i, (b, r) in enumerate(tasks):
                results[(b, r)] = _one_replication(config, b, r)
                if progress:
                    progress(i + 1, len(tasks))
    else:
        size = max(1, len(tasks) // (threads * 8))
        chunks = [(config, tasks[i:i + size]) for i in range(0, len(tasks), size)]
        done = 0
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init) as ex:
            for chunk in ex.map(_run_chunk, chunks):
                for b, r, out in chunk:
                    results[(b, r)] = out
                done += len(chunk)
                if progress:
                    progress(done, len(tasks))
    return aggregate(config, results)


def aggregate(config: SimConfig, results: dict) -> SimResult:
    out = SimResult()
    nb, nr = len(config.beta_grid), config.replications
    for b, beta in enumerate(config.beta_grid):
        reps = [results[(b, r)] for r in range(nr)]
        out.pi_range[(config.name, beta)] = (
            float(np.mean([x[1] for x in reps])), float(np.mean([x[2] for x in reps]))
        )
        for m in config.methods:
            rows = [x[0][m] for x in reps]
            ok = np.array([row[3] for row in rows])
            err = np.array([row[0] for row in rows])[ok]
            cov = np.array([row[1] for row in rows])[ok]
            rt = float(np.mean([row[2] for row in rows]))
            if err.size:
                bias_sq = float(np.mean(err)) ** 2
                mse = float(np.mean(err * err))
                coverage = float(np.mean(cov))
            else:
                bias_sq = mse = coverage = float("nan")
            label = f"{m}{config.model_degree}" if m != "oracle" else m
            out.cells.append(SimCell(
                config.name, label, beta, bias_sq, mse, coverage, rt, int((~ok).sum()), err, cov,
            ))
    return out


def increasing_confounders_study(
    K_grid: Sequence[int] = (2, 20, 50, 100),
    beta: float = 2.0,
    replications: int = 200,
    seed: int = 20190401,
    n: int = 200,
    methods: Sequence[str] = ("kom", "ra", "sbw"),
    threads: int = 1,
) -> SimResult:
    """Correct linear design with a growing number of confounders."""
    result = SimResult()
    for K in K_grid:
        cfg = SimConfig("correct_linear", (beta,), n, K, 1.0, replications, seed,
                        tuple(methods), 1, label=f"correct_linear_K{K}")
        result.extend(run(cfg, threads))
    return result


# --------------------------------------------------------------------------
# presets


def preset_configs(name: str, replications: int = 200, seed: int = 20190401) -> list:
    grid = default_beta_grid()
    if name == "figure1":
        scen = ("correct_linear", "correct_nonlinear")
        methods = ("kom", "iptw", "tiptw", "ra", "sbw")
        return [SimConfig(s, grid, replications=replications, seed=seed, methods=methods) for s in scen]
    if name == "figure2":
        scen = ("misspecified_linear", "misspecified_nonlinear")
        methods = ("kom", "iptw", "tiptw", "ra", "sbw")
        return [SimConfig(s, grid, replications=replications, seed=seed, methods=methods) for s in scen]
    if name == "table1":
        methods = ("kom", "iptw", "tiptw", "sbw")
        return [SimConfig(s, (3.0,), replications=replications, seed=seed, methods=methods) for s in SCENARIOS]
    raise UnsupportedConfigError(f"unknown preset {name!r}")


def coverage_table(result: SimResult) -> str:
    """Scenario x method coverage table as CSV text."""
    scen = list(dict.fromkeys(c.scenario for c in result.cells))
    methods = list(dict.fromkeys(c.method.rstrip("0123456789") for c in result.cells))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", *methods])
    for s in scen:
        row = [s]
        for m in methods:
            vals = [c.coverage for c in result.cells if c.scenario == s and c.method.rstrip("0123456789") == m]
            row.append(repr(vals[0]) if vals else "")
        w.writerow(row)
    return buf.getvalue()
