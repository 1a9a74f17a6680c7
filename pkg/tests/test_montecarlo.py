import json

import numpy as np
import pytest

from drvar.errors import UsageError
from drvar.estimation import fit_drvar
from drvar.factor_space import m_matrix, subspace_distance
from drvar.montecarlo import (
    CSV_HEADER,
    DGPConfig,
    MCReport,
    calibrated_model,
    data_based_dgp,
    generate_dgp,
    grid_from_config,
    replication_seed,
    rfd,
    run_cell,
    run_model_cell,
    simulate_drvar,
    stack_phi,
    synthetic_macro_panel,
    toeplitz_sigma,
    write_reports_csv,
    write_reports_json,
)
from drvar.panel import transform_panel


def test_config_validation():
    with pytest.raises(UsageError):
        DGPConfig(n=5, r=6, T=100)
    with pytest.raises(UsageError):
        DGPConfig(n=5, r=2, T=5)
    with pytest.raises(UsageError):
        DGPConfig(n=5, r=2, T=100, burn_in=-1)
    assert DGPConfig(n=7, r=1, T=20, r_equals_n=True).r == 7


def test_toeplitz_examples():
    np.testing.assert_allclose(toeplitz_sigma(3, 0.5), [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]])
    np.testing.assert_array_equal(toeplitz_sigma(4, 0.0), np.eye(4))
    assert np.linalg.eigvalsh(toeplitz_sigma(300, 0.5)).min() > 0
    with pytest.raises(UsageError):
        toeplitz_sigma(3, 1.0)


def test_dgp_truth_identities():
    panel, truth = generate_dgp(DGPConfig(n=12, r=3, T=100, seed=4))
    assert (panel.T, panel.n) == (100, 12)
    A, Abar = truth["A"], truth["Abar"]
    np.testing.assert_allclose(A.T @ A, np.eye(3), atol=1e-10)
    pinv = np.linalg.pinv(Abar)
    for j, d in enumerate((truth["delta1"], truth["delta2"])):
        np.testing.assert_allclose(truth["phi"][j], Abar @ np.diag(d) @ pinv, atol=1e-10)
        np.testing.assert_allclose(A @ truth["alphas"][j] @ A.T, truth["phi"][j], atol=1e-10)
    m = truth["m"]
    # roots of 1 - 2m cos(w) z + m^2 z^2 have modulus 1/m
    for d1, d2 in zip(truth["delta1"], truth["delta2"]):
        roots = np.roots([-d2, -d1, 1.0])
        assert np.all(np.abs(roots) >= 1 / 0.9 - 1e-12)
    assert np.all((0.3 <= m) & (m <= 0.9))
    assert -0.5 <= truth["tau"] <= 0.5


def test_dgp_static_component_white_noise():
    panel, truth = generate_dgp(DGPConfig(n=6, r=2, T=20000, seed=9))
    eps = panel.data - truth["xbar"] @ truth["Abar"].T
    np.testing.assert_allclose(eps, truth["eps"], atol=1e-10)
    e = eps - eps.mean(0)
    c1 = e[1:].T @ e[:-1] / len(e)
    se = np.sqrt(np.outer(e.var(0), e.var(0)) / len(e))
    assert np.all(np.abs(c1) < 4 * se)


def test_dgp_stationary_halves():
    panel, _ = generate_dgp(DGPConfig(n=10, r=3, T=4000, seed=3))
    v1 = panel.data[:2000].var(0)
    v2 = panel.data[2000:].var(0)
    assert np.all(np.abs(v2 / v1 - 1) < 0.2)


def test_dgp_reproducible_and_seed_sensitive():
    a, _ = generate_dgp(DGPConfig(n=8, r=2, T=50, seed=1))
    b, _ = generate_dgp(DGPConfig(n=8, r=2, T=50, seed=1))
    c, _ = generate_dgp(DGPConfig(n=8, r=2, T=50, seed=2))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_fixed_tau():
    _, truth = generate_dgp(DGPConfig(n=8, r=2, T=50, seed=1, tau=0.3))
    np.testing.assert_allclose(truth["sigma_eta"], toeplitz_sigma(8, 0.3))


def test_rfd_examples(rng):
    phi = rng.standard_normal((6, 3))
    assert rfd(phi, phi) == 0.0
    assert rfd(2 * phi, phi) == pytest.approx(100.0)
    assert rfd(np.zeros_like(phi), phi) == pytest.approx(100.0)
    with pytest.raises(UsageError):
        rfd(phi, np.zeros_like(phi))
    with pytest.raises(UsageError):
        rfd(phi[:3], phi)


def test_stack_phi_layout(rng):
    phis = [rng.standard_normal((3, 3)) for _ in range(2)]
    np.testing.assert_array_equal(stack_phi(phis), np.vstack([phis[0].T, phis[1].T]))


def test_replication_reproducible():
    cfg = DGPConfig(n=30, r=2, T=60, seed=5)
    a = run_cell(cfg, 4, R=5, cell=3)
    b = run_cell(cfg, 4, R=5, cell=3)
    assert a.rows == b.rows
    assert replication_seed(5, 3, 1).generate_state(2).tolist() == replication_seed(5, 3, 1).generate_state(2).tolist()


def test_parallel_matches_serial():
    cfg = DGPConfig(n=20, r=2, T=60, seed=2)
    a = run_cell(cfg, 6, R=5)
    b = run_cell(cfg, 6, R=5, n_jobs=2)
    assert a.rows == b.rows


def test_report_invariants_and_exports(tmp_path):
    rep = run_cell(DGPConfig(n=30, r=3, T=60, seed=5), 10, R=6)
    for meth, row in rep.rows.items():
        assert 0 <= row["pct_correct"] <= 100 and 0 <= row["pct_under"] <= 100
        assert row["pct_correct"] + row["pct_under"] <= 100
        assert (row["rfd_mean"] is None) == (meth == "LY")
    write_reports_csv([rep], tmp_path / "r.csv")
    write_reports_json([rep], tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 5
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc[0]["rows"]["BIC"] == rep.rows["BIC"]


def test_r_equals_n_report():
    rep = run_cell(DGPConfig(n=15, r=15, T=30, seed=1, r_equals_n=True), 4, R=6)
    assert rep.r_equals_n
    assert all(row["rfd_mean"] is None for row in rep.rows.values())


def test_grid_from_config():
    doc = {"cells": [{"n": 150, "r": 3, "T_ratio": 1.5, "reps": 20}, {"n": 10, "r": "n", "T": 40}]}
    grid = grid_from_config(doc, seed=4)
    assert grid[0][0].T == 225 and grid[0][1] == 20
    assert grid[1][0].r == 10 and grid[1][0].r_equals_n and grid[1][1] == 200
    with pytest.raises(UsageError):
        grid_from_config({"cells": [{"n": 10}]})
    with pytest.raises(UsageError):
        grid_from_config({})


def test_simulate_drvar_clamps_non_psd(rng):
    m = fit_drvar(rng.standard_normal((50, 4)), 1, 1)
    m.sigma_u = np.diag([1.0, 1.0, 1.0, -1e-3])
    with pytest.warns(UserWarning, match="PSD"):
        Y = simulate_drvar(m, 30, seed=0)
    assert Y.shape == (30, 4) and np.all(np.isfinite(Y))


def test_simulate_drvar_dimensions_and_names(fitted_small):
    panel = data_based_dgp(fitted_small, 77, seed=1)
    assert (panel.T, panel.n) == (77, 20)


def test_simulate_drvar_is_a_drvar(rng):
    # the white-noise directions of Y carry no autocorrelation
    panel, truth = generate_dgp(DGPConfig(n=10, r=2, T=200, seed=1))
    model = fit_drvar(panel, 2, 2, A=truth["A"])
    Y = simulate_drvar(model, 20000, seed=3)
    from drvar.factor_space import orthonormal_complement

    W = Y @ orthonormal_complement(model.A)
    W = W - W.mean(0)
    c1 = W[1:].T @ W[:-1] / len(W)
    assert np.abs(c1).max() < 4 * W.var(0).max() / np.sqrt(len(W))


@pytest.mark.slow
def test_consistency_trend_in_T():
    for n in (150, 300):
        for pen in ("BIC", "HQIC"):
            pcts = []
            for ratio in (0.5, 1.0, 1.5):
                rep = run_cell(DGPConfig(n=n, r=3, T=int(ratio * n), seed=11), 60)
                pcts.append(rep.rows[pen]["pct_correct"])
            assert pcts[0] <= pcts[1] + 5 and pcts[1] <= pcts[2] + 5, (n, pen, pcts)
            assert pcts[0] <= pcts[2]


def test_calibrated_model_structure():
    m = calibrated_model()
    assert (m.n, m.r, m.p) == (211, 8, 2)
    assert m.companion_radius() < 0.95
    assert np.linalg.eigvalsh(m.sigma_u).min() > 0
    Y = simulate_drvar(m, 2000, seed=1)
    assert abs(Y.var(0).mean() - 1) < 0.15


@pytest.mark.slow
def test_calibrated_design_rank_recovery():
    rep = run_model_cell(calibrated_model(), 484, 100, seed=0)
    assert rep.rows["HQIC"]["pct_correct"] >= 90
    assert rep.rows["LY"]["pct_correct"] <= 15


def test_synthetic_panel_inverts_to_dgp():
    raw, truth = synthetic_macro_panel(n=25, T=60, r=2, seed=3)
    assert raw.tcodes[:5] == (1, 2, 4, 5, 6)
    assert np.all(raw.data[:, [j for j, c in enumerate(raw.tcodes) if c >= 4]] > 0)
    stat = transform_panel(raw)
    panel, _ = generate_dgp(DGPConfig(n=25, r=2, T=60, seed=3))
    # level codes keep their offset, so compare demeaned columns
    got = stat.data - stat.data.mean(0)
    want = 0.005 * (panel.data[2:] - panel.data[2:].mean(0))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)
    V = m_matrix(stat, p0=2, R=2).leading(2)
    assert subspace_distance(V, truth["A"]) < 0.5


def test_mc_report_dict_round_trip():
    rep = MCReport(n=3, r=1, T=10, R=2, reps=1, failures=0, rows={}, wall_clock=0.0,
                   r_hats={"LY": np.array([1])})
    assert rep.to_dict()["r_hats"] == {"LY": [1]}
