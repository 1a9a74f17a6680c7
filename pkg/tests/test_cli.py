import csv
import hashlib
import json

import numpy as np
import pytest

from drvar.cli import bundled_fixture, main
from drvar.estimation import fit_drvar, forecast
from drvar.montecarlo import DGPConfig, generate_dgp
from drvar.panel import load_panel, write_panel
from drvar.persistence import load_model


def _run(tmp_path, name, *argv):
    d = tmp_path / name
    code = main([*argv, "--run-dir", str(d)])
    return code, d


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    panel, _ = generate_dgp(DGPConfig(n=12, r=2, T=300, seed=4))
    path = tmp_path_factory.mktemp("data") / "panel.csv"
    write_panel(panel, path)
    return path


def test_select_fixture_hqic(tmp_path, capsys):
    code, d = _run(tmp_path, "sel", "select", str(_fixture_transformed(tmp_path)), "--pmax", "4")
    assert code == 0
    sel = json.loads((d / "selection.json").read_text())
    assert sel["HQIC"] == 3
    assert {"scree.csv", "ic_table.csv", "lag_table.csv", "manifest.json"} <= {p.name for p in d.iterdir()}
    assert json.loads(capsys.readouterr().out.splitlines()[-2]) == sel


def _fixture_transformed(tmp_path):
    code, d = _run(tmp_path, "tr", "transform", str(bundled_fixture()))
    assert code == 0
    return d / "panel.csv"


def test_transform_does_not_mutate_input(tmp_path):
    before = _sha(bundled_fixture())
    path = _fixture_transformed(tmp_path)
    assert _sha(bundled_fixture()) == before
    panel = load_panel(path)
    assert panel.n == 211 and panel.T < 242
    np.testing.assert_allclose(panel.data.mean(0), 0, atol=1e-10)


def test_fit_then_forecast(tmp_path, small_csv):
    code, d = _run(tmp_path, "fit", "fit", str(small_csv), "--r", "2", "--p", "2")
    assert code == 0
    model = load_model(d / "model.json")
    panel = load_panel(small_csv)
    ref = fit_drvar(panel, 2, 2)
    np.testing.assert_allclose(model.A, ref.A, atol=1e-12)
    code, f = _run(tmp_path, "fc", "forecast", str(d / "model.json"), str(small_csv), "--k", "1")
    assert code == 0
    rows = list(csv.reader((f / "forecast.csv").open()))
    got = np.array(rows[1][1:], dtype=float)
    H = panel.data[-2:]
    A, a = model.A, model.alphas
    expected = A @ (a[0] @ A.T @ H[1] + a[1] @ A.T @ H[0])
    np.testing.assert_allclose(got, expected, atol=1e-10)
    np.testing.assert_allclose(got, forecast(model, H, 1)[0], atol=1e-12)


def test_structural_outputs_and_reproducibility(tmp_path, small_csv):
    _, d = _run(tmp_path, "fit", "fit", str(small_csv), "--r", "2")
    model = str(d / "model.json")
    outs = []
    for name in ("s1", "s2"):
        code, s = _run(tmp_path, name, "structural", model, str(small_csv), "--bootstrap", "50",
                       "--seed", "3", "--horizons", "5", "--emit-plot-data")
        assert code == 0
        outs.append(s)
    expected = {"spectrum.csv", "fit_metrics.csv", "theta_shares.csv", "contributions.csv",
                "nu_contributions.csv", "irf.csv", "irf_cumulated.csv", "mbccc.csv",
                "contributions_se.csv", "manifest.json"}
    assert expected == {p.name for p in outs[0].iterdir()}
    for name in expected - {"manifest.json"}:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["seeds"] == {"bootstrap": 3}
    assert set(man["inputs"]) == {model, str(small_csv)}
    assert man["versions"]["numpy"] == np.__version__
    assert "wall_clock_seconds" in man
    rows = list(csv.reader((outs[0] / "contributions.csv").open()))
    assert [r[0] for r in rows[1:]] == ["6-32", "inf"]


def test_recursive_scheme(tmp_path, small_csv):
    _, d = _run(tmp_path, "fit", "fit", str(small_csv), "--r", "2")
    code, s = _run(tmp_path, "s", "structural", str(d / "model.json"), str(small_csv),
                   "--scheme", "recursive", "--shock", "2")
    assert code == 0
    assert not (s / "theta_shares.csv").exists()


def test_pipeline_default_fixture(tmp_path, capsys):
    code, d = _run(tmp_path, "pipe", "pipeline", "--emit-plot-data")
    assert code == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0]) == {"p": 2, "r": 3}
    for name in ("panel.csv", "model.json", "spectrum.csv", "contributions.csv", "mbccc.csv"):
        assert (d / name).stat().st_size > 0


def test_config_file(tmp_path, small_csv):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"r": 1, "p": 1}))
    code, d = _run(tmp_path, "fit", "fit", str(small_csv), "--config", str(cfg))
    assert code == 0
    m = load_model(d / "model.json")
    assert (m.r, m.p) == (1, 1)
    code, d = _run(tmp_path, "fit2", "fit", str(small_csv), "--config", str(cfg), "--r", "2")
    assert load_model(d / "model.json").r == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert _run(tmp_path, "fit3", "fit", str(small_csv), "--config", str(cfg))[0] == 2


def test_exit_codes(tmp_path, small_csv, capsys):
    assert main(["fit", str(small_csv)]) == 2
    assert _run(tmp_path, "a", "fit", str(small_csv), "--r", "0")[0] == 2
    assert _run(tmp_path, "b", "fit", str(tmp_path / "missing.csv"), "--r", "2")[0] == 3
    bad = tmp_path / "trunc.json"
    bad.write_text('{"schema_version": 1, "n"')
    assert _run(tmp_path, "c", "forecast", str(bad), str(small_csv))[0] == 3
    assert _run(tmp_path, "d", "mc")[0] == 2
    assert _run(tmp_path, "e", "mc", "--design", "calibrated", "--reps", "-1")[0] == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("drvar: error code=") for line in err if line.startswith("drvar:"))
    assert "exit=2" in err[-1]


def test_fixture_command(tmp_path):
    target = tmp_path / "fx.csv"
    code, _ = _run(tmp_path, "fx", "fixture", "--path", str(target))
    assert code == 0
    assert target.read_bytes() == bundled_fixture().read_bytes()


def test_mc_small_grid(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"cells": [{"n": 20, "r": 2, "T_ratio": 2, "reps": 4}]}))
    code, d = _run(tmp_path, "mc", "mc", "--grid", str(grid), "--R", "5")
    assert code == 0
    rows = list(csv.reader((d / "report.csv").open()))
    assert rows[0][:4] == ["n", "r", "T", "method"]
    assert {r[3] for r in rows[1:]} >= {"BIC", "HQIC", "AIC", "LY"}


@pytest.mark.slow
def test_mc_table1_cell(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"cells": [{"n": 150, "r": 3, "T_ratio": 1, "reps": 200}]}))
    code, d = _run(tmp_path, "mc", "mc", "--grid", str(grid), "--seed", "1", "--R", "14", "--jobs", "4")
    assert code == 0
    rows = {r["method"]: r for r in csv.DictReader((d / "report.csv").open())}
    assert abs(float(rows["BIC"]["pct_correct"]) - 80.3) <= 6
