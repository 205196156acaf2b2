import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from nawt import cli
from nawt.errors import NonConvergence
from nawt.model import Dataset, write_csv
from nawt.numerics import RngStream
from nawt.simulation import generate_main


@pytest.fixture(scope="module")
def fixture_csv(tmp_path_factory):
    ds, _ = generate_main("a", 800, RngStream(123, 0))
    path = tmp_path_factory.mktemp("data") / "scenario_a.csv"
    write_csv(Dataset(ds.x[:, 1:], ds.t, ds.y, ds.names[1:]), path)
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_fit_smoke(fixture_csv, capsys):
    code, out, _ = run(["--command", "fit", "--input", fixture_csv, "--scheme", "power", "--alpha", "2"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["fits"][0]["converged"] is True
    assert math.isfinite(rep["se"]) and rep["se"] > 0
    assert rep["fits"][0]["pi_hat"]["n_clamped"] == 0
    assert {r["covariate"] for r in rep["balance"]} == {"x1", "x2", "x3", "x4"}
    assert len(rep["config_hash"]) == 16


def test_unknown_column_exit_2(fixture_csv, capsys):
    code, out, err = run(["--command", "fit", "--input", fixture_csv, "--covariates", "x1,income"], capsys)
    assert code == 2 and out == ""
    payload = json.loads(err)["error"]
    assert payload["column"] == "income" and "income" in payload["message"]


def test_missing_file_exit_4(tmp_path, capsys):
    code, _, err = run(["--command", "fit", "--input", str(tmp_path / "none.csv")], capsys)
    assert code == 4
    assert json.loads(err)["error"]["code"] == "io_error"


def test_convergence_failure_exit_3(fixture_csv, capsys, monkeypatch):
    def boom(cfg):
        raise NonConvergence("stuck", score_norm=0.1, iterations=100)

    monkeypatch.setitem(cli.HANDLERS, "fit", boom)
    code, _, err = run(["--command", "fit", "--input", fixture_csv], capsys)
    assert code == 3
    assert json.loads(err)["error"]["code"] == "non_convergence"


def test_fit_bootstrap_is_byte_identical(fixture_csv, tmp_path, capsys):
    paths = [tmp_path / "one.json", tmp_path / "two.json"]
    for p in paths:
        argv = ["--command", "fit", "--input", fixture_csv, "--variance", "bootstrap", "--n-boot", "100"]
        assert run(argv + ["--seed", "5", "--out", str(p)], capsys)[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rep = json.loads(paths[0].read_text())
    assert rep["variance_method"] == "bootstrap" and rep["seed"] == 5


def test_bootstrap_requires_seed(fixture_csv, capsys):
    code, _, err = run(["--command", "fit", "--input", fixture_csv, "--variance", "bootstrap"], capsys)
    assert code == 2 and json.loads(err)["error"]["key"] == "seed"


def test_fit_other_estimands(fixture_csv, capsys):
    for est, scheme in [("atc", "power"), ("ate-separate", "power"), ("ate-combined", "combined"), ("att", "cbps-att")]:
        code, out, err = run(["--command", "fit", "--input", fixture_csv, "--estimand", est, "--scheme", scheme], capsys)
        assert code == 0, err
        assert abs(json.loads(out)["tau"] - 10) < 6


def test_fit_ao(tmp_path, capsys):
    g = np.random.default_rng(1)
    n = 400
    x = g.standard_normal(n)
    m = (g.random(n) < 1 / (1 + np.exp(-x))).astype(int)
    y = 1 + x + g.standard_normal(n)
    path = tmp_path / "ao.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "x", "y"])
        for mi, xi, yi in zip(m, x, y):
            w.writerow([int(mi), repr(float(xi)), "" if mi else repr(float(yi))])
    argv = ["--command", "fit", "--input", str(path), "--treatment", "m", "--estimand", "ao", "--scheme", "cbps-att"]
    code, out, err = run(argv, capsys)
    assert code == 0, err
    assert abs(json.loads(out)["tau"] - 1) < 0.5


def test_config_file_and_override(fixture_csv, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# fit settings\ncommand = fit\ninput = {fixture_csv}\nscheme = mle   # standard\nalpha = 3\n")
    code, out, _ = run(["--config", str(cfg)], capsys)
    assert code == 0
    assert json.loads(out)["fits"][0]["scheme"] == "mle"
    code, out, _ = run(["--config", str(cfg), "--scheme", "power"], capsys)
    assert json.loads(out)["fits"][0]["scheme"] == "power(3)"


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("command = fit\nwidth = 3\n")
    code, _, err = run(["--config", str(cfg)], capsys)
    assert code == 2 and json.loads(err)["error"]["key"] == "width"


def test_bad_values_exit_2(capsys):
    assert run(["--command", "simulate", "--seed", "1", "--replicates", "0"], capsys)[0] == 2
    assert run(["--command", "simulate", "--replicates", "5"], capsys)[0] == 2
    assert run(["--command", "simulate", "--seed", "x", "--replicates", "5"], capsys)[0] == 2
    assert run(["--command", "nope"], capsys)[0] == 2
    assert run([], capsys)[0] == 2


def test_simulate_table(capsys):
    argv = ["--command", "simulate", "--scenario", "a", "--n", "300", "--replicates", "6", "--seed", "3"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    rep = json.loads(out)
    assert [r["method"] for r in rep["rows"]] == ["nawt", "ipw", "cbps"]
    assert rep["reference"] == {}
    code, out, _ = run(argv + ["--n", "1000", "--replicates", "2"], capsys)
    assert json.loads(out)["reference"]["cbps"]["rmse"] == 0.086


def test_json_and_csv_carry_same_numbers(capsys):
    argv = ["--command", "simulate", "--scenario", "b", "--n", "300", "--replicates", "5", "--seed", "8"]
    _, js, _ = run(argv, capsys)
    _, cs, _ = run(argv + ["--format", "csv"], capsys)
    rows = json.loads(js)["rows"]
    body = [line for line in cs.splitlines() if not line.startswith("#")]
    table = list(csv.DictReader(body))
    for jr, cr in zip(rows, table):
        for key in ("bias", "rmse", "variance", "coverage95", "mean_se"):
            assert float(cr[key]) == jr[key]
    assert f"# config_hash = {json.loads(js)['config_hash']}" in cs


def test_simulate_cubic_and_ate(capsys):
    argv = ["--command", "simulate", "--scenario", "cubic", "--b0", "2,0,1", "--treated-model", "3"]
    argv += ["--ps-model", "mis1", "--n", "300", "--replicates", "4", "--seed", "1", "--methods", "ipw,nawt,adaptive"]
    code, out, err = run(argv, capsys)
    assert code == 0, err
    assert [r["method"] for r in json.loads(out)["rows"]] == ["ipw", "nawt", "adaptive"]
    argv = ["--command", "simulate", "--scenario", "a", "--estimand", "ate-separate", "--n", "300"]
    code, out, _ = run(argv + ["--replicates", "3", "--seed", "1"], capsys)
    assert [r["method"] for r in json.loads(out)["rows"]] == ["nawt", "ipw", "cbps", "combined"]


def test_scan_alpha_singleton(capsys):
    code, out, _ = run(["--command", "scan-alpha", "--alphas", "0", "--seed", "2"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["chosen_alpha"] == 0.0 and rep["mode"] == "adaptive"


def test_scan_alpha_adaptive_table(fixture_csv, capsys):
    code, out, _ = run(["--command", "scan-alpha", "--input", fixture_csv, "--alphas", "0,2,4"], capsys)
    rep = json.loads(out)
    assert code == 0 and len(rep["rows"]) == 3
    best = min(rep["rows"], key=lambda r: r["variance"])
    assert best["chosen"] and best["alpha"] == rep["chosen_alpha"]


def test_scan_alpha_monte_carlo(capsys):
    argv = ["--command", "scan-alpha", "--scenario", "c", "--n", "500", "--replicates", "20", "--seed", "4"]
    code, out, _ = run(argv + ["--alphas", "0,2"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["mode"] == "monte-carlo"
    chosen = [r for r in rep["rows"] if r["chosen"]]
    assert len(chosen) == 1 and chosen[0]["rmse"] == min(r["rmse"] for r in rep["rows"])


def test_illustrate_outputs(tmp_path, capsys):
    out = tmp_path / "fig1.csv"
    code, _, err = run(["--command", "illustrate", "--seed", "1", "--n", "200000", "--out", str(out), "--format", "csv"], capsys)
    assert code == 0, err
    curves = tmp_path / "fig1_curves.csv"
    assert out.exists() and curves.exists()
    table = list(csv.DictReader(line for line in out.read_text().splitlines() if not line.startswith("#")))
    assert len(table) == 11
    sel = [r for r in table if float(r["np_pi"]) > 0.5]
    gap = lambda k: np.mean([abs(float(r[k]) - float(r["np_pi"])) for r in sel])
    assert gap("nawt_pi") < gap("mle_pi")
    rows = list(csv.DictReader(line for line in curves.read_text().splitlines() if not line.startswith("#")))
    att = {float(r["pi_hat"]): r for r in rows if r["kind"] == "att"}
    assert float(att[0.5]["expected_p0.5"]) == pytest.approx(0.028427, abs=1e-6)
    mle = [r for r in rows if r["kind"] == "mle"]
    for p in ("0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"):
        best = max(mle, key=lambda r: float(r[f"expected_p{p}"]))
        assert float(best["pi_hat"]) == pytest.approx(float(p))


def test_loglik_curves_direct():
    rows = cli.loglik_curves(2.0)
    assert len(rows) == 2 * 99
    r = next(r for r in rows if r["kind"] == "att" and r["pi_hat"] == 0.5)
    assert r["l1"] == 0.125
    assert r["l0"] == pytest.approx(-0.068147, abs=1e-6)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "nawt.cli", "--command", "simulate", "--replicates", "0", "--seed", "1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"]["code"] == "config_error"
