import csv
import hashlib
import json

import numpy as np
import pytest

from komsate import cli
from komsate.data import load_csv
from komsate.estimators import wls_sate
from komsate.gp import tune as real_tune
from komsate.simulation import CSV_HEADER, generate, replication_rng

from conftest import write_csv


@pytest.fixture
def csv_path(tmp_path):
    d, _ = generate("correct_linear", 80, 2, 1.0, 1.0, replication_rng(3, "correct_linear", 0, 0))
    rows = [[x[0], x[1], t, y] for x, t, y in zip(d.X, d.T, d.Y)]
    return write_csv(tmp_path / "data.csv", ["x1", "x2", "t", "y"], rows)


def _data_args(path):
    return ["-i", str(path), "--covariates", "x1,x2", "--treatment", "t", "--outcome", "y"]


def _read_weights(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["treatment"]) for r in rows]), np.array([float(r["weight"]) for r in rows])


def test_tune_writes_params_and_manifest(csv_path, tmp_path, capsys):
    out = tmp_path / "p.toml"
    assert cli.main(["tune", *_data_args(csv_path), "--write", str(out), "--seed", "5"]) == 0
    assert "treated" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "p.toml.manifest.json").read_text())
    assert manifest["command"] == "tune" and manifest["seed"] == 5
    assert manifest["inputs"][str(csv_path)] == hashlib.sha256(csv_path.read_bytes()).hexdigest()
    first = out.read_bytes()
    assert cli.main(["tune", *_data_args(csv_path), "--write", str(out), "--seed", "5"]) == 0
    assert out.read_bytes() == first


def test_tune_missing_outcome(csv_path, capsys):
    args = ["tune", "-i", str(csv_path), "--covariates", "x1,x2", "--outcome", "response"]
    assert cli.main(args) == 2
    assert "'response'" in capsys.readouterr().err


def test_weights_and_verify(csv_path, tmp_path):
    w_path, d_path = tmp_path / "w.csv", tmp_path / "w.json"
    assert cli.main(["weights", *_data_args(csv_path), "--degree", "2", "-o", str(w_path)]) == 0
    T, w = _read_weights(w_path)
    assert abs(w[T == 1].sum() - 1) < 1e-9 and abs(w[T == 0].sum() - 1) < 1e-9
    verify = ["verify", *_data_args(csv_path), "--weights", str(w_path), "--diagnostics", str(d_path)]
    assert cli.main(verify) == 0
    diag = json.loads(d_path.read_text())
    assert diag["kernel"] == {"family": "polynomial", "degree": 2}
    diag["objective"] *= 1.01
    d_path.write_text(json.dumps(diag))
    assert cli.main(verify) == 3


def test_weights_from_params_without_outcome(csv_path, tmp_path):
    params = tmp_path / "p.toml"
    assert cli.main(["tune", *_data_args(csv_path), "--write", str(params)]) == 0
    no_y = tmp_path / "noy.csv"
    with open(csv_path) as src, open(no_y, "w") as dst:
        for line in src:
            dst.write(",".join(line.rstrip("\n").split(",")[:3]) + "\n")
    out = tmp_path / "w.csv"
    args = ["weights", "-i", str(no_y), "--covariates", "x1,x2", "--params", str(params),
            "--sigma", "homoskedastic:2", "-o", str(out)]
    assert cli.main(args) == 0
    diag = json.loads((tmp_path / "w.json").read_text())
    assert diag["sigma_sq"] == {"treated": 2.0, "control": 2.0}
    assert cli.main([*args[:-4], "--sigma", "homoskedastic:x", "-o", str(out)]) == 2


def test_estimate_iptw_equals_weights_pipeline(csv_path, tmp_path):
    out = tmp_path / "est.json"
    assert cli.main(["estimate", *_data_args(csv_path), "--method", "iptw", "--degree", "1", "-o", str(out)]) == 0
    est = json.loads(out.read_text())
    w_path = tmp_path / "w.csv"
    assert cli.main(["weights", *_data_args(csv_path), "--method", "iptw", "--degree", "1", "-o", str(w_path)]) == 0
    _, w = _read_weights(w_path)
    res = wls_sate(load_csv(csv_path, "t", ["x1", "x2"], "y"), w)
    assert est["tau_hat"] == pytest.approx(res.tau_hat, abs=1e-12)
    assert est["se"] == pytest.approx(res.se, abs=1e-12)
    assert est["ci"][0] == pytest.approx(res.ci_low, abs=1e-12)


def test_degree_sweep(csv_path, tmp_path):
    out = tmp_path / "sweep.json"
    assert cli.main(["estimate", *_data_args(csv_path), "--method", "ra", "--degrees", "1..3", "-o", str(out)]) == 0
    sweep = json.loads(out.read_text())["sweep"]
    assert [r["degree"] for r in sweep] == [1, 2, 3]


@pytest.mark.parametrize("method", ["kom", "tiptw", "sbw"])
def test_estimate_methods(csv_path, method, capsys):
    assert cli.main(["estimate", *_data_args(csv_path), "--method", method, "--degree", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert np.isfinite(out["tau_hat"]) and out["se"] >= 0


def test_unknown_method(csv_path):
    assert cli.main(["estimate", *_data_args(csv_path), "--method", "psm"]) == 2


def test_strict_turns_nonconvergence_into_exit_3(csv_path, monkeypatch):
    monkeypatch.setattr(cli, "tune", lambda *a, **k: real_tune(*a, max_iter=1, n_restarts=0, **k))
    assert cli.main(["tune", *_data_args(csv_path), "--strict"]) == 3
    assert cli.main(["tune", *_data_args(csv_path)]) == 0


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["bogus"])
    assert info.value.code == 2
    assert cli.main(["estimate", "--covariates", "x"]) == 2
    assert cli.main(["tune", "-i", str(tmp_path / "missing.csv"), "--covariates", "x"]) == 2


def test_simulate_preset_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["simulate", "--table1", "--reps", "2", "--seed", "7"]
    assert cli.main([*base, "--threads", "1", "-o", str(a)]) == 0
    assert cli.main([*base, "--threads", "2", "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert (tmp_path / "a_table1.csv").read_text().splitlines()[0] == "scenario,kom,iptw,tiptw,sbw"
    assert (tmp_path / "a.csv.manifest.json").exists()


def test_simulate_from_toml(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text('[simulate]\nscenario = "correct_linear"\nbetas = "0.5"\nreps = 2\nmethods = "iptw,ra"\n')
    out = tmp_path / "s.csv"
    assert cli.main(["simulate", "--config", str(cfg), "-o", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("correct_linear,iptw1,0.5,")


def test_explicit_flag_beats_toml(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text('[simulate]\nscenario = "correct_linear"\nbetas = "0.5"\nreps = 2\nmethods = "iptw"\n')
    out = tmp_path / "s.csv"
    assert cli.main(["simulate", "--config", str(cfg), "--methods", "ra", "-o", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("correct_linear,ra1,")
    cfg.write_text("[simulate]\nnot_a_flag = 1\n")
    assert cli.main(["simulate", "--config", str(cfg), "-o", str(out)]) == 2
