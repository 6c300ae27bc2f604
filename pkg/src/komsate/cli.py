"""Command-line entry point: ``komsate {tune,weights,verify,estimate,simulate}``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, Dataset, load_csv, studentize
from .estimators import (
    EstimationError, fit_propensity, iptw_estimate, iptw_weights, regression_adjustment,
    sbw_fit, truncate_weights, wls_sate,
)
from .gp import InsufficientDataError, NonPDError, tune
from .kernels import Hyperparams, KernelSpec, gram
from .kom import decompose, kom_weights
from . import simulation

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_with_manifest(path: Path, text: str, args, started: str, inputs=()) -> None:
    _atomic_write(path, text)
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs},
        "output": {str(path): hashlib.sha256(text.encode("utf-8")).hexdigest()},
        "started": started,
        "finished": _now(),
    }
    _atomic_write(Path(str(path) + ".manifest.json"), json.dumps(manifest, indent=2, default=str) + "\n")


# --------------------------------------------------------------------------
# shared argument handling


def _load_dataset(args) -> Dataset:
    if not args.input:
        raise UsageError("--input is required")
    if not args.treatment or not args.covariates:
        raise UsageError("--treatment and --covariates are required")
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
    return load_csv(args.input, args.treatment, covs, args.outcome)


def _kernel_template(args) -> KernelSpec:
    return KernelSpec(args.kernel, args.degree)


def _add_data_args(p):
    p.add_argument("--input", "-i", help="input CSV with a header row")
    p.add_argument("--outcome", default="y", help="outcome column (default: y)")
    p.add_argument("--treatment", default="t", help="binary treatment column (default: t)")
    p.add_argument("--covariates", help="comma-separated covariate columns")


def _add_kernel_args(p, degree=3):
    p.add_argument("--kernel", default="polynomial", choices=["linear", "polynomial", "gaussian"])
    p.add_argument("--degree", type=int, default=degree)
    p.add_argument("--mode", default="full", choices=["full", "diagonal"],
                   help="covariate studentization")


def _params_toml(spec: KernelSpec, p1: Hyperparams, p0: Hyperparams, extra=None) -> str:
    lines = ["[kernel]", f'family = "{spec.family}"', f"degree = {spec.degree}", ""]
    for name, p in (("treated", p1), ("control", p0)):
        lines += [f"[{name}]", f"gamma = {p.gamma!r}", f"theta = {p.theta!r}", f"lambda = {p.lam!r}"]
        if extra and name in extra:
            lines.append(f"logml = {extra[name]!r}")
        lines.append("")
    return "\n".join(lines)


def _read_params(path):
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    k = cfg.get("kernel", {})
    spec = KernelSpec(k.get("family", "polynomial"), int(k.get("degree", 3)))
    p = [Hyperparams(cfg[a]["gamma"], cfg[a]["theta"], cfg[a]["lambda"]) for a in ("treated", "control")]
    return spec, p[0], p[1]


def _sigma_override(arg: str, n: int):
    if arg in (None, "gp"):
        return None
    if arg.startswith("homoskedastic:"):
        try:
            v = float(arg.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --sigma value {arg!r}") from None
        if v < 0:
            raise UsageError("homoskedastic variance must be nonnegative")
        return np.full(n, v)
    raise UsageError(f"--sigma must be 'gp' or 'homoskedastic:<value>', got {arg!r}")


# --------------------------------------------------------------------------
# subcommands


def cmd_tune(args) -> int:
    started = _now()
    data = _load_dataset(args)
    data.outcome()
    view = studentize(data, args.mode)
    res = tune(data, view, _kernel_template(args), seed=args.seed)
    print(f"{'arm':<8}{'gamma':>14}{'theta':>14}{'lambda':>14}{'logml':>14}")
    for name, p, ll in (("treated", res.params_treated, res.logml_treated),
                        ("control", res.params_control, res.logml_control)):
        print(f"{name:<8}{p.gamma:>14.6g}{p.theta:>14.6g}{p.lam:>14.6g}{ll:>14.6g}")
    if not res.converged:
        print("warning: tuning stopped before the gradient tolerance", file=sys.stderr)
        if args.strict:
            raise NumericalFailure("hyperparameter tuning did not converge")
    if args.write:
        text = _params_toml(_kernel_template(args), res.params_treated, res.params_control,
                            {"treated": res.logml_treated, "control": res.logml_control})
        _write_with_manifest(Path(args.write), text, args, started, [args.input])
    return EXIT_OK


def _kom_solution(args, data):
    template = _kernel_template(args)
    params = None
    if getattr(args, "params", None):
        spec, p1, p0 = _read_params(args.params)
        template, params = spec, (p1, p0)
    sigma = _sigma_override(getattr(args, "sigma", "gp"), data.n)
    if params is None:
        data.outcome()
    return kom_weights(data, template, params=params, sigma_sq=sigma, mode=args.mode, seed=args.seed)


def _baseline_weights(args, data):
    if args.method in ("iptw", "tiptw"):
        model = fit_propensity(data, args.degree)
        w = iptw_weights(model, data)
        if args.method == "tiptw":
            w = truncate_weights(w, 1.0, 99.0)
        return w, {"method": args.method, "degree": args.degree,
                   "propensity_converged": model.converged, "separated": model.separated}
    if args.method == "sbw":
        fit = sbw_fit(data, args.degree)
        return fit.w, {"method": "sbw", "degree": args.degree, "balance_tolerance": fit.tol,
                       "escalations": fit.escalations, "max_violation": fit.max_violation}
    raise UsageError(f"unknown weighting method {args.method!r}")


def cmd_weights(args) -> int:
    started = _now()
    data = _load_dataset(args)
    if args.method == "kom":
        sol = _kom_solution(args, data)
        if not sol.converged and args.strict:
            raise NumericalFailure("QP solver did not converge")
        w = sol.w
        diag = sol.diagnostics()
        diag["method"] = "kom"
        diag["sigma_sq"] = {"treated": float(sol.sigma_sq[data.T == 1][0]),
                            "control": float(sol.sigma_sq[data.T == 0][0])}
        diag["studentization"] = args.mode
        summary = (f"objective {sol.objective:.6g} (delta1^2 {sol.delta1_sq:.4g}, "
                   f"delta0^2 {sol.delta0_sq:.4g}, variance {sol.variance_term:.4g})")
    else:
        w, diag = _baseline_weights(args, data)
        summary = f"{args.method} weights"
    buf = [["unit_id", "treatment", "weight"]]
    buf += [[i + 1, int(t), repr(float(v))] for i, (t, v) in enumerate(zip(data.T, w))]
    text = "".join(",".join(map(str, r)) + "\n" for r in buf)
    out = Path(args.output)
    _write_with_manifest(out, text, args, started, [args.input])
    diag_path = Path(args.diagnostics) if args.diagnostics else out.with_suffix(".json")
    _write_with_manifest(diag_path, json.dumps(diag, indent=2) + "\n", args, started, [args.input])
    print(f"wrote {out} and {diag_path}; {summary}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Recompute the reported objective from weights and diagnostics."""
    data = _load_dataset(args)
    with open(args.diagnostics, encoding="utf-8") as fh:
        diag = json.load(fh)
    if diag.get("method", "kom") != "kom":
        raise UsageError("verify recomputes the KOM objective; diagnostics are for another method")
    w = np.zeros(data.n)
    with open(args.weights, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            w[int(row["unit_id"]) - 1] = float(row["weight"])
    k = diag["kernel"]
    hp = diag["hyperparams"]
    view = studentize(data, diag.get("studentization", "full"))
    specs = {}
    for arm in ("treated", "control"):
        p = hp[arm]
        specs[arm] = KernelSpec(k["family"], k["degree"], Hyperparams(p["gamma"], p["theta"], p["lambda"]))
    sig = np.where(data.T == 1, diag["sigma_sq"]["treated"], diag["sigma_sq"]["control"])
    d1, d0, var = decompose(gram(specs["treated"], view.Z), gram(specs["control"], view.Z), sig, data.T, w)
    total = d1 + d0 + var
    gap = abs(total - diag["objective"])
    ok = gap <= 1e-8 * max(1.0, abs(total))
    print(json.dumps({"recomputed_objective": total, "reported_objective": diag["objective"],
                      "abs_gap": gap, "ok": ok}, indent=2))
    return EXIT_OK if ok else EXIT_NUMERIC


def _parse_degrees(text: str):
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def estimate_one(args, data: Dataset, method: str, degree: int):
    if method == "kom":
        args_deg = argparse.Namespace(**{**vars(args), "degree": degree})
        sol = _kom_solution(args_deg, data)
        if not sol.converged and args.strict:
            raise NumericalFailure("QP solver did not converge")
        res = wls_sate(data, sol.w, f"kom{degree}")
        return res, sol.diagnostics()
    if method == "iptw":
        return iptw_estimate(data, degree), {}
    if method == "tiptw":
        return iptw_estimate(data, degree, truncate=(1.0, 99.0)), {}
    if method == "ra":
        return regression_adjustment(data, degree, seed=args.seed), {}
    if method == "sbw":
        fit = sbw_fit(data, degree)
        res = wls_sate(data, fit.w, f"sbw{degree}")
        return res, {"balance_tolerance": fit.tol, "escalations": fit.escalations}
    raise UsageError(f"unknown method {method!r}")


def cmd_estimate(args) -> int:
    started = _now()
    data = _load_dataset(args)
    data.outcome()
    if args.method not in ("kom", "iptw", "tiptw", "ra", "sbw"):
        raise UsageError(f"unknown method {args.method!r}")
    if args.degrees:
        rows = []
        print(f"{'degree':>6}{'tau_hat':>14}{'se':>12}{'ci_low':>12}{'ci_high':>12}")
        for d in _parse_degrees(args.degrees):
            res, _ = estimate_one(args, data, args.method, d)
            rows.append({"degree": d, **res.as_dict()})
            print(f"{d:>6}{res.tau_hat:>14.6g}{res.se:>12.4g}{res.ci_low:>12.4g}{res.ci_high:>12.4g}")
        taus = [r["tau_hat"] for r in rows]
        payload = {"method": args.method, "sweep": rows,
                   "sd_across_degrees": float(np.std(taus, ddof=1)) if len(taus) > 1 else 0.0}
    else:
        res, diag = estimate_one(args, data, args.method, args.degree)
        payload = {**res.as_dict(), "diagnostics": diag}
        print(json.dumps(payload, indent=2, default=float))
    text = json.dumps(payload, indent=2, default=float) + "\n"
    if args.output:
        _write_with_manifest(Path(args.output), text, args, started, [args.input])
    return EXIT_OK


def _simulate_configs(args):
    presets = [p for p in ("figure1", "figure2", "figure3", "table1") if getattr(args, p)]
    if args.preset:
        presets.append(args.preset)
    if presets:
        return presets, []
    if not args.scenario:
        raise UsageError("give a preset (--figure1/--figure2/--figure3/--table1) or --scenario")
    betas = tuple(float(b) for b in args.betas.split(",")) if args.betas else simulation.default_beta_grid()
    methods = tuple(m.strip() for m in args.methods.split(","))
    cfg = simulation.SimConfig(args.scenario, betas, args.n, args.K, args.delta, args.reps,
                               args.seed, methods, args.model_degree)
    return [], [cfg]


def cmd_simulate(args) -> int:
    started = _now()
    presets, cfgs = _simulate_configs(args)
    threads = args.threads or simulation.default_threads()
    result = simulation.SimResult()
    table = None

    def progress(done, total):
        if args.verbose:
            print(f"\r{done}/{total}", end="", file=sys.stderr, flush=True)

    for name in presets:
        if name == "figure3":
            result.extend(simulation.increasing_confounders_study(
                replications=args.reps, seed=args.seed, threads=threads))
            continue
        part = simulation.SimResult()
        for cfg in simulation.preset_configs(name, args.reps, args.seed):
            part.extend(simulation.run(cfg, threads, progress))
        if name == "table1":
            table = simulation.coverage_table(part)
        result.extend(part)
    for cfg in cfgs:
        result.extend(simulation.run(cfg, threads, progress))
    if args.verbose:
        print(file=sys.stderr)
    out = Path(args.output)
    _write_with_manifest(out, result.to_csv(args.record_runtime), args, started)
    print(result.to_csv(args.record_runtime), end="")
    if table is not None:
        tpath = out.with_name(out.stem + "_table1.csv")
        _write_with_manifest(tpath, table, args, started)
        print(table, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="komsate", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML file whose [<command>] table mirrors the flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--strict", action="store_true", help="treat non-convergence as fatal (exit 3)")

    p = sub.add_parser("tune", help="tune kernel hyperparameters by GP marginal likelihood")
    _add_data_args(p)
    _add_kernel_args(p)
    common(p)
    p.add_argument("--write", help="write tuned parameters to this TOML file")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("weights", help="compute KOM weights")
    _add_data_args(p)
    _add_kernel_args(p)
    common(p)
    p.add_argument("--method", default="kom", help="kom, iptw, tiptw or sbw")
    p.add_argument("--params", help="hyperparameter TOML from `tune --write` (skips tuning)")
    p.add_argument("--sigma", default="gp", help="'gp' or 'homoskedastic:<variance>'")
    p.add_argument("--output", "-o", required=True, help="weights CSV path")
    p.add_argument("--diagnostics", help="diagnostics JSON path (default: next to weights)")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("verify", help="recompute a weights run's objective independently")
    _add_data_args(p)
    p.add_argument("--config", help="TOML file whose [verify] table mirrors the flags")
    p.add_argument("--weights", required=True)
    p.add_argument("--diagnostics", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("estimate", help="estimate the SATE with one method")
    _add_data_args(p)
    _add_kernel_args(p)
    common(p)
    p.add_argument("--method", default="kom")
    p.add_argument("--degrees", help="degree sweep, e.g. 1..5 or 2,3")
    p.add_argument("--params", help="hyperparameter TOML for kom")
    p.add_argument("--sigma", default="gp")
    p.add_argument("--output", "-o", help="JSON output path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run the Monte Carlo comparison")
    common(p)
    p.set_defaults(seed=20190401)
    for name in ("figure1", "figure2", "figure3", "table1"):
        p.add_argument(f"--{name}", action="store_true", help=f"{name} preset")
    p.add_argument("--preset", choices=["figure1", "figure2", "figure3", "table1"])
    p.add_argument("--scenario", choices=list(simulation.SCENARIOS))
    p.add_argument("--betas", help="comma-separated beta values")
    p.add_argument("--methods", default="kom,iptw,tiptw,ra,sbw")
    p.add_argument("--model-degree", type=int, default=None)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--record-runtime", action="store_true",
                   help="fill the runtime column (output is then not byte-reproducible)")
    p.add_argument("--output", "-o", default="simulation.csv")
    p.add_argument("--verbose", "-v", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with TOML values as defaults so explicit flags still win."""
    with open(args.config, "rb") as fh:
        table = tomllib.load(fh).get(args.command, {})
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    known = {a.dest for a in sub.choices[args.command]._actions}
    values = {k.replace("-", "_"): v for k, v in table.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown keys in [{args.command}] of {args.config}: {', '.join(unknown)}")
    sub.choices[args.command].set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except (UsageError, DataError, EstimationError, InsufficientDataError,
            simulation.UnsupportedConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, NonPDError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
