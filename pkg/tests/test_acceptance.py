"""Acceptance criteria for the package, one test per criterion.

Each test prints a PASS/FAIL line and registers it for the end-of-session
summary. Simulation-based criteria share module-scoped runs.
"""

import json
import time

import numpy as np
import pytest

from komsate import cli
from komsate.data import Dataset, studentize
from komsate.gp import log_marginal_likelihood
from komsate.kernels import Hyperparams, KernelSpec, gram
from komsate.kom import assemble, kom_weights, solve_weights
from komsate.qp import QpProblem, solve
from komsate.simulation import (
    SCENARIOS, SimConfig, default_beta_grid, gen_linear, generate, replication_rng, run,
)

from conftest import write_csv
from oracles import product_grid_min, qp_batch, random_feasible, random_psd

REPS = 200
RESULTS = {}


def report(key, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {key} {title}: {detail}"
    RESULTS[key] = line
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 1. QP oracle equivalence


def test_c01_qp_oracle_equivalence():
    rng = np.random.default_rng(101)
    T = np.array([1, 0, 1, 0, 1, 0])
    start = time.perf_counter()
    worst_rand, worst_kkt, worst_grid = -np.inf, 0.0, 0.0
    for _ in range(25):
        Q, c = random_psd(6, rng), rng.standard_normal(6)
        sol = solve(QpProblem(Q, c, T))
        f = qp_batch(Q, c)
        worst_rand = max(worst_rand, sol.objective - f(random_feasible(T, 100_000, rng)).min())
        worst_kkt = max(worst_kkt, sol.kkt_residual)
        worst_grid = max(worst_grid, abs(sol.objective - product_grid_min(f, T, 0.02)))
    elapsed = time.perf_counter() - start
    ok = worst_rand <= 1e-9 and worst_kkt < 1e-6 and worst_grid < 1e-3 and elapsed < 60
    report("C1", "QP oracle equivalence", ok,
           f"max(obj - best random) {worst_rand:.2e} (<= 1e-9), max KKT {worst_kkt:.2e} (< 1e-6), "
           f"max |obj - grid| {worst_grid:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")


# --------------------------------------------------------------------------
# 2. Decomposition identity


def _decomposition(K1, K0, sigma_sq, T, w):
    n = T.size
    total = 0.0
    for K, t in ((K1, 1), (K0, 0)):
        idx = np.flatnonzero(T == t)
        # split (I_t w - e) into the arm block and the constant -1/n part
        wa = w[idx]
        total += wa @ K[np.ix_(idx, idx)] @ wa - 2.0 / n * wa @ K[idx].sum(axis=1) + K.sum() / n ** 2
    return total + float(np.dot(w ** 2, sigma_sq))


def test_c02_decomposition_identity():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        n, p = int(rng.integers(8, 60)), int(rng.integers(1, 4))
        X = rng.standard_normal((n, p))
        T = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        fam = rng.choice(["polynomial", "gaussian"])
        spec = KernelSpec(str(fam), int(rng.integers(1, 5)))
        hp = [Hyperparams(*np.exp(rng.uniform(-2, 1.5, 3))) for _ in range(2)]
        Z = studentize(Dataset(X, T)).Z
        K1, K0 = gram(spec.with_params(hp[0]), Z), gram(spec.with_params(hp[1]), Z)
        sig = rng.uniform(0, 2, n)
        sol = solve_weights(K1, K0, sig, T)
        worst = max(worst, abs(sol.objective - _decomposition(K1, K0, sig, T, sol.w)))
    report("C2", "decomposition identity", worst < 1e-8, f"max |objective - decomposition| {worst:.2e} (< 1e-8)")


# --------------------------------------------------------------------------
# 3. Conditional bias identity


def test_c03_bias_identity():
    rng = np.random.default_rng(303)
    X = rng.standard_normal((20, 2))
    T = np.array([1, 0] * 10)
    data = Dataset(X, T)

    def f1(x):
        return 1.0 + x[:, 0] + 0.5 * x[:, 1] ** 2

    def f0(x):
        return x[:, 0] * x[:, 1] - 0.3 * x[:, 1]

    p = Hyperparams(1.0, 0.5, 1.0)
    w = kom_weights(data, KernelSpec("polynomial", 2), params=(p, p)).w
    n = 20
    rhs = (np.sum((np.where(T == 1, w, 0) - 1 / n) * f1(X))
           - np.sum((np.where(T == 0, w, 0) - 1 / n) * f0(X)))
    mean = np.where(T == 1, f1(X), f0(X))
    csate = np.mean(f1(X) - f0(X))
    signed = w * np.where(T == 1, 1.0, -1.0)
    draws = rng.standard_normal((100_000, n))
    err = (mean + draws) @ signed - csate
    lhs, se = err.mean(), err.std(ddof=1) / np.sqrt(err.size)
    gap = abs(lhs - rhs)
    report("C3", "conditional bias identity", gap < 4 * se,
           f"MC bias {lhs:.5f} vs closed form {rhs:.5f}, gap {gap:.2e} (< 4 SE = {4 * se:.2e})")


# --------------------------------------------------------------------------
# 4. GP gradient check


def test_c04_gp_gradient():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(20):
        m, p = int(rng.integers(5, 30)), int(rng.integers(1, 4))
        Z, y = rng.standard_normal((m, p)), rng.standard_normal(m)
        fam = str(rng.choice(["polynomial", "gaussian"]))
        spec = KernelSpec(fam, int(rng.integers(1, 6)))
        logp = rng.uniform(-1.5, 1.0, 3)
        _, g = log_marginal_likelihood(spec.with_params(Hyperparams.from_log(logp)), Z, y)
        fd = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-5
            up = log_marginal_likelihood(spec.with_params(Hyperparams.from_log(logp + e)), Z, y)[0]
            dn = log_marginal_likelihood(spec.with_params(Hyperparams.from_log(logp - e)), Z, y)[0]
            fd[k] = (up - dn) / 2e-5
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    report("C4", "GP gradient check", worst < 1e-4, f"max relative error {worst:.2e} (< 1e-4)")


# --------------------------------------------------------------------------
# shared simulation runs


@pytest.fixture(scope="module")
def linear_grid():
    start = time.perf_counter()
    res = run(SimConfig("correct_linear", default_beta_grid(), replications=REPS,
                        methods=("kom", "iptw", "tiptw")))
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def misspecified_runs():
    betas = tuple(b for b in default_beta_grid() if b >= 1.5)
    return {s: run(SimConfig(s, betas, replications=REPS, methods=("kom", "iptw", "tiptw")))
            for s in ("misspecified_linear", "misspecified_nonlinear")}


def test_c05_figure1_linear(linear_grid):
    res, elapsed = linear_grid
    rows, ok = [], True
    ratios = []
    for beta in default_beta_grid():
        k, i = res.cell("kom1", beta), res.cell("iptw1", beta)
        ok &= k.mse <= i.mse
        ratios.append(i.mse / k.mse)
        rows.append(f"b={beta:.2f}: {k.mse:.4f}/{i.mse:.4f}")
    ok &= ratios[-1] > ratios[0]
    ok &= elapsed < 1800
    report("C5", "figure 1 correct linear (KOM vs IPTW MSE)", ok,
           "; ".join(rows) + f"; IPTW/KOM ratio {ratios[0]:.2f} -> {ratios[-1]:.2f}; {elapsed / 60:.1f} min (< 30)")


def test_c06_table1_coverage(linear_grid):
    res, _ = linear_grid
    k, i, t = (res.cell(m, 3.0) for m in ("kom1", "iptw1", "tiptw1"))
    nl = run(SimConfig("correct_nonlinear", (3.0,), replications=REPS, methods=("kom", "iptw")))
    k2, i2 = nl.cell("kom2", 3.0), nl.cell("iptw2", 3.0)
    checks = {
        "linear KOM in [0.85, 0.98]": 0.85 <= k.coverage <= 0.98,
        "linear IPTW < 0.60": i.coverage < 0.60,
        "linear tIPTW < 0.20": t.coverage < 0.20,
        "nonlinear KOM2 in [0.80, 0.96]": 0.80 <= k2.coverage <= 0.96,
        "nonlinear IPTW2 < 0.05": i2.coverage < 0.05,
    }
    values = [k.coverage, i.coverage, t.coverage, k2.coverage, i2.coverage]
    detail = "; ".join(f"{name}: {v:.3f} {'ok' if c else 'MISS'}" for (name, c), v in zip(checks.items(), values))
    report("C6", "table 1 coverage", all(checks.values()), detail)


def test_c07_misspecified_ordering(misspecified_runs):
    ok, rows = True, []
    for scen, res in misspecified_runs.items():
        for beta in sorted({c.beta for c in res.cells}):
            k, i, t = (res.cell(m, beta).mse for m in ("kom3", "iptw3", "tiptw3"))
            good = k < i and k < t
            ok &= good
            rows.append(f"{scen[13:]} b={beta:.2f}: {k:.3f}/{i:.3f}/{t:.3f}{'' if good else ' MISS'}")
    report("C7", "misspecified ordering (KOM3/IPTW3/tIPTW3 MSE)", ok, "; ".join(rows))


def test_c08_runtime():
    data, _ = gen_linear(200, 2, 1.0, 1.0, np.random.default_rng(808))
    start = time.perf_counter()
    sol = kom_weights(data, KernelSpec("polynomial", 3), seed=0)
    elapsed = time.perf_counter() - start
    report("C8", "single KOM fit runtime", elapsed < 10 and sol.converged,
           f"{elapsed:.2f}s for tune + assemble + solve at n=200, p=2, d=3 (< 10s)")


def test_c09_exact_sate():
    worst, count = 0.0, 0
    for s in SCENARIOS:
        for b, beta in enumerate(default_beta_grid()):
            for r in range(REPS):
                _, truth = generate(s, 200, 2, beta, 1.0, replication_rng(909, s, b, r))
                worst = max(worst, abs(truth.sate - 1.0))
                count += 1
    report("C9", "exact SATE invariant", worst <= 1e-12, f"max |SATE - delta| {worst:.1e} over {count} draws")


def test_c10_determinism(tmp_path):
    outputs = {}
    for preset, reps in (("table1", "4"), ("figure3", "2")):
        for threads in ("1", "2", "1"):
            out = tmp_path / f"{preset}_{threads}_{len(outputs)}.csv"
            rc = cli.main(["simulate", f"--{preset}", "--reps", reps, "--seed", "77",
                           "--threads", threads, "-o", str(out)])
            assert rc == 0
            side = out.with_name(out.stem + "_table1.csv")
            outputs.setdefault(preset, []).append(out.read_bytes() + (side.read_bytes() if side.exists() else b""))
    same = {p: len(set(v)) == 1 for p, v in outputs.items()}
    report("C10", "determinism across reruns and thread counts", all(same.values()),
           ", ".join(f"{p}: {'identical' if s else 'DIFFERENT'} over 3 runs (threads 1, 2, 1)"
                     for p, s in same.items()))


# --------------------------------------------------------------------------
# degree-sweep stability


def test_degree_sweep_stability(tmp_path):
    sd = {"kom": [], "iptw": []}
    for scen in ("misspecified_linear", "misspecified_nonlinear"):
        for r in range(10):
            d, _ = generate(scen, 200, 2, 1.55, 1.0, replication_rng(1111, scen, 0, r))
            path = write_csv(tmp_path / f"{scen}_{r}.csv", ["z1", "z2", "t", "y"],
                             [[x[0], x[1], t, y] for x, t, y in zip(d.X, d.T, d.Y)])
            for method in sd:
                out = tmp_path / f"{scen}_{r}_{method}.json"
                rc = cli.main(["estimate", "-i", str(path), "--covariates", "z1,z2", "--method", method,
                               "--degrees", "2..5", "--seed", str(r), "-o", str(out)])
                assert rc == 0
                sd[method].append(json.loads(out.read_text())["sd_across_degrees"])
    mk, mi = np.median(sd["kom"]), np.median(sd["iptw"])
    report("SWEEP", "degree-sweep stability (median SD over degrees 2-5)", mk < mi,
           f"KOM {mk:.4f} vs IPTW {mi:.4f} over 20 misspecified datasets "
           f"(means {np.mean(sd['kom']):.4f} vs {np.mean(sd['iptw']):.4f})")
