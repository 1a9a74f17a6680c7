"""Simulation designs and the replication harness.

The artificial design is an ``n``-dimensional VAR(2) with ``r`` dynamic
components,

    Y_t = Abar diag(d1) Abar^+ Y_{t-1} + Abar diag(d2) Abar^+ Y_{t-2} + u_t,

``d1 = 2 m cos(w)``, ``d2 = -m^2`` with ``m ~ U[0.3, 0.9]`` and
``w ~ U[0, pi]``. Errors are built from ``eta_t ~ N(0, Toeplitz(tau))``: the
first ``r`` coordinates drive a diagonal VAR(2) for ``xbar`` and the
remaining ``n - r`` load on an orthonormal complement of ``Abar``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .errors import DRVARError, UsageError
from .estimation import DRVARModel, PENALTIES, fit_drvar, select_rank
from .factor_space import ly_rank, m_matrix, orthonormal_complement
from .panel import Panel, from_array

logger = logging.getLogger(__name__)

METHODS = ("LY",) + tuple(reversed(PENALTIES))  # LY, BIC, HQIC, AIC
DEFAULT_R = 11


@dataclass
class DGPConfig:
    """One simulation cell.

    ``tau=None`` draws the Toeplitz parameter from U[-0.5, 0.5] in every
    replication; a number fixes it.
    """

    n: int
    r: int
    T: int
    burn_in: int = 50
    seed: int = 0
    r_equals_n: bool = False
    tau: Optional[float] = None

    def __post_init__(self):
        if self.r_equals_n:
            self.r = self.n
        if not 1 <= self.r <= self.n:
            raise UsageError(f"need 1 <= r <= n, got r={self.r}, n={self.n}")
        if self.T < 10:
            raise UsageError(f"T must be at least 10, got {self.T}")
        if self.burn_in < 0:
            raise UsageError("burn_in must be non-negative")
        if self.tau is not None and not abs(self.tau) < 1:
            raise UsageError(f"|tau| must be below 1, got {self.tau}")


def toeplitz_sigma(n: int, tau: float) -> np.ndarray:
    """Matrix with entries ``tau^|i-j|``."""
    if not abs(tau) < 1:
        raise UsageError(f"|tau| must be below 1, got {tau}")
    k = np.arange(n)
    return float(tau) ** np.abs(k[:, None] - k[None, :])


def _sym_sqrt(M):
    w, V = np.linalg.eigh(M)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def generate_dgp(cfg: DGPConfig, rng=None):
    """Simulate one panel from the artificial design.

    Returns ``(panel, truth)`` where ``truth`` holds ``Abar, A, alphas,
    phi, sigma_u, sigma_eta, delta1, delta2, m, omega, tau`` and the
    simulated ``xbar`` and ``eps`` (post burn-in).
    """
    rng = _rng(cfg.seed if rng is None else rng)
    n, r, T, burn = cfg.n, cfg.r, cfg.T, cfg.burn_in
    Abar = rng.standard_normal((n, r))
    m = rng.uniform(0.3, 0.9, r)
    omega = rng.uniform(0.0, np.pi, r)
    d1 = 2.0 * m * np.cos(omega)
    d2 = -(m**2)
    tau = rng.uniform(-0.5, 0.5) if cfg.tau is None else float(cfg.tau)
    sigma_eta = toeplitz_sigma(n, tau)
    L = np.linalg.cholesky(sigma_eta)
    eta = rng.standard_normal((T + burn, n)) @ L.T

    xbar = np.empty((T + burn, r))
    for i in range(r):
        xbar[:, i] = signal.lfilter([1.0], [1.0, -d1[i], -d2[i]], eta[:, i])
    Aperp = orthonormal_complement(Abar)
    eps = eta[:, r:] @ Aperp.T
    Y = xbar @ Abar.T + eps
    Y, xbar, eps = Y[burn:], xbar[burn:], eps[burn:]

    S, S_inv = _sym_sqrt(Abar.T @ Abar)
    A = Abar @ S_inv
    alphas = [S @ np.diag(d) @ S_inv for d in (d1, d2)]
    Apinv = np.linalg.solve(Abar.T @ Abar, Abar.T)
    phi = [Abar @ np.diag(d) @ Apinv for d in (d1, d2)]
    B = np.hstack([Abar, Aperp])
    truth = {
        "Abar": Abar,
        "A": A,
        "alphas": alphas,
        "phi": phi,
        "sigma_u": B @ sigma_eta @ B.T,
        "sigma_eta": sigma_eta,
        "delta1": d1,
        "delta2": d2,
        "m": m,
        "omega": omega,
        "tau": tau,
        "xbar": xbar,
        "eps": eps,
    }
    return from_array(Y), truth


def rfd(phi_hat, phi_true) -> float:
    """Frobenius distance relative to the true norm, in percent."""
    phi_hat = np.asarray(phi_hat, dtype=float)
    phi_true = np.asarray(phi_true, dtype=float)
    if phi_hat.shape != phi_true.shape:
        raise UsageError(f"shape mismatch: {phi_hat.shape} vs {phi_true.shape}")
    den = np.linalg.norm(phi_true)
    if den == 0:
        raise UsageError("true coefficient matrix has zero norm")
    return float(100.0 * np.linalg.norm(phi_hat - phi_true) / den)


def stack_phi(phi) -> np.ndarray:
    return np.vstack([np.asarray(ph).T for ph in phi])


# ----------------------------------------------------------------------------
# data-based design


def simulate_drvar(model: DRVARModel, T: int, seed=0, burn_in: int = 50) -> np.ndarray:
    """Simulate ``T`` observations from a DRVAR with Gaussian errors.

    The error covariance is ``model.sigma_u`` (or ``diag(delta_u)`` when it
    is missing), projected onto the PSD cone if needed.
    """
    rng = _rng(seed)
    n, p = model.n, model.p
    S = model.sigma_u if model.sigma_u is not None else np.diag(model.delta_u)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() < -1e-10 * max(1.0, w.max()):
        warnings.warn("error covariance is not PSD; clamping negative eigenvalues at zero")
    root = V * np.sqrt(np.clip(w, 0.0, None))
    U = rng.standard_normal((T + burn_in, n)) @ root.T
    # the dynamics live in x = A'Y; the rest of Y is the current error only
    Xi = U @ model.A
    x = np.zeros((T + burn_in + p, model.r))
    for t in range(T + burn_in):
        acc = Xi[t].copy()
        for j, a in enumerate(model.alphas, start=1):
            acc += a @ x[p + t - j]
        x[p + t] = acc
    x = x[p:]
    # Y_t = A * sum_j alpha_j x_{t-j} + u_t
    Y = U + (x - Xi) @ model.A.T
    return Y[burn_in:]


def data_based_dgp(model: DRVARModel, T: int, seed=0, burn_in: int = 50) -> Panel:
    """Panel of ``T`` draws from a fitted DRVAR, with the model's names."""
    Y = simulate_drvar(model, T, seed=seed, burn_in=burn_in)
    names = model.names if model.names is not None else [f"y{j + 1}" for j in range(model.n)]
    return Panel(data=Y, names=names)


# ----------------------------------------------------------------------------
# replication harness


@dataclass
class MCReport:
    """Aggregated results for one cell.

    ``rows[method]`` has ``pct_correct`` (``r_hat == r``, or ``r_hat == R``
    when ``r == n``), ``pct_under``, ``mean_r_hat`` and, for the
    information criteria when ``r < n``, RFD statistics.
    """

    n: int
    r: int
    T: int
    R: int
    reps: int
    failures: int
    rows: dict
    wall_clock: float
    estimator: str = "ols"
    r_hats: dict = field(default_factory=dict)

    @property
    def r_equals_n(self) -> bool:
        return self.r == self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_hats"] = {k: [int(x) for x in v] for k, v in self.r_hats.items()}
        return d

    def csv_rows(self):
        for meth, row in self.rows.items():
            yield [
                self.n, self.r, self.T, meth,
                f"{row['pct_correct']:.1f}", f"{row['pct_under']:.1f}",
                f"{row['mean_r_hat']:.3f}",
                "" if row.get("rfd_mean") is None else f"{row['rfd_mean']:.2f}",
                "" if row.get("rfd_median") is None else f"{row['rfd_median']:.2f}",
            ]


CSV_HEADER = ["n", "r", "T", "method", "pct_correct", "pct_under", "mean_r_hat", "rfd_mean", "rfd_median"]


def write_reports_csv(reports, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep in reports:
            for row in rep.csv_rows():
                w.writerow(row)


def write_reports_json(reports, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))


def replication_seed(base_seed: int, cell: int, rep: int) -> np.random.SeedSequence:
    """Independent stream per ``(cell, rep)``; any replication can be rerun alone."""
    return np.random.SeedSequence([int(base_seed), int(cell), int(rep)])


def _evaluate(Y, truth_phi, r_true, p, p0, R, estimator):
    """Rank estimates (and RFD when the truth has ``r < n``) for one panel."""
    n = Y.shape[1]
    fs = m_matrix(Y, p0=p0, R=R + 1 if R + 1 <= n else R)
    out = {"LY": ly_rank(fs.eigenvalues, R)}
    table = select_rank(Y, p=p, R=R, method=estimator, factor_space=fs)
    chosen = table.chosen
    rfds = {}
    for pen in PENALTIES:
        q = chosen[pen]
        out[pen] = q
        if truth_phi is not None:
            model = fit_drvar(Y, q, p, method=estimator, A=fs.vectors[:, :q])
            rfds[pen] = rfd(model.stacked_phi(), truth_phi)
    return out, rfds


def _one_replication(args):
    cfg, ss, p, p0, R, estimator = args
    try:
        panel, truth = generate_dgp(cfg, rng=np.random.default_rng(ss))
        truth_phi = None if cfg.r == cfg.n else stack_phi(truth["phi"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _evaluate(panel.data, truth_phi, cfg.r, p, p0, R, estimator)
    except (DRVARError, np.linalg.LinAlgError) as exc:
        logger.warning("replication failed: %s", exc)
        return None


def _one_model_replication(args):
    model, T, ss, p, p0, R, estimator, r_true = args
    try:
        Y = simulate_drvar(model, T, seed=np.random.default_rng(ss))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _evaluate(Y, model.stacked_phi(), r_true, p, p0, R, estimator)
    except (DRVARError, np.linalg.LinAlgError) as exc:
        logger.warning("replication failed: %s", exc)
        return None


def _aggregate(results, n, r, T, R, reps, estimator, t0) -> MCReport:
    ok = [res for res in results if res is not None]
    if not ok:
        raise DRVARError("every replication failed")
    rows, r_hats = {}, {}
    for meth in METHODS:
        rh = np.array([res[0][meth] for res in ok])
        r_hats[meth] = rh
        target = R if r == n else r
        row = {
            "pct_correct": 100.0 * float(np.mean(rh == target)),
            "pct_under": 100.0 * float(np.mean(rh < r)) if r < n else 0.0,
            "mean_r_hat": float(rh.mean()),
            "rfd_mean": None,
            "rfd_median": None,
            "rfd_q25": None,
            "rfd_q75": None,
        }
        if meth != "LY" and r < n:
            v = np.array([res[1][meth] for res in ok])
            q25, q50, q75 = np.percentile(v, [25, 50, 75])
            row.update(rfd_mean=float(v.mean()), rfd_median=float(q50),
                       rfd_q25=float(q25), rfd_q75=float(q75))
        rows[meth] = row
    return MCReport(
        n=n, r=r, T=T, R=R, reps=reps, failures=len(results) - len(ok), rows=rows,
        wall_clock=time.perf_counter() - t0, estimator=estimator, r_hats=r_hats,
    )


def _map(fn, jobs, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))


def run_cell(
    cfg: DGPConfig,
    reps: int,
    estimator: str = "ols",
    p: int = 2,
    p0: int = 2,
    R: int = DEFAULT_R,
    cell: int = 0,
    n_jobs: int = 1,
) -> MCReport:
    """Replicate one artificial-design cell ``reps`` times.

    ``p0`` defaults to the true lag order of the design. Replication seeds come
    from ``(cfg.seed, cell, rep)``.
    """
    if reps < 1:
        raise UsageError("reps must be at least 1")
    if not 1 <= R < cfg.n:
        raise UsageError(f"R must satisfy 1 <= R < n={cfg.n}")
    t0 = time.perf_counter()
    jobs = [(cfg, replication_seed(cfg.seed, cell, i), p, p0, R, estimator) for i in range(reps)]
    results = _map(_one_replication, jobs, n_jobs)
    return _aggregate(results, cfg.n, cfg.r, cfg.T, R, reps, estimator, t0)


def run_experiment(grid, reps: int, estimator: str = "ols", n_jobs: int = 1, **kw) -> list:
    """Run :func:`run_cell` for every config in ``grid``; cell index = position."""
    return [run_cell(cfg, reps, estimator=estimator, cell=i, n_jobs=n_jobs, **kw)
            for i, cfg in enumerate(grid)]


def run_model_cell(
    model: DRVARModel,
    T: int,
    reps: int,
    seed: int = 0,
    estimator: str = "ols",
    p0: Optional[int] = None,
    R: int = 14,
    cell: int = 0,
    n_jobs: int = 1,
) -> MCReport:
    """Replicate the data-based design: simulate from ``model``, re-select ``r``."""
    if reps < 1:
        raise UsageError("reps must be at least 1")
    p = model.p
    p0 = p if p0 is None else p0
    t0 = time.perf_counter()
    jobs = [(model, T, replication_seed(seed, cell, i), p, p0, R, estimator, model.r)
            for i in range(reps)]
    results = _map(_one_model_replication, jobs, n_jobs)
    return _aggregate(results, model.n, model.r, T, R, reps, estimator, t0)


def grid_from_config(doc: dict, seed: int = 0):
    """Parse ``{"cells": [{"n", "r", "T_ratio", "reps"}, ...]}``.

    ``r`` may be the string ``"n"``. Returns ``[(DGPConfig, reps), ...]``.
    """
    cells = doc.get("cells", doc if isinstance(doc, list) else None)
    if not cells:
        raise UsageError("grid config needs a non-empty 'cells' list")
    out = []
    for c in cells:
        try:
            n = int(c["n"])
            r_eq_n = str(c["r"]).lower() == "n"
            r = n if r_eq_n else int(c["r"])
            T = int(c["T"]) if "T" in c else int(round(float(c["T_ratio"]) * n))
            reps = int(c.get("reps", 200))
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"bad grid cell {c!r}: {exc}") from None
        out.append((DGPConfig(n=n, r=r, T=T, seed=int(c.get("seed", seed)), r_equals_n=r_eq_n,
                              tau=c.get("tau")), reps))
    return out


# ----------------------------------------------------------------------------
# calibrated data-based design and a synthetic macro panel

# Average share of each series' variance carried by each dynamic component:
# two dominant, persistent components and six weak ones, so the eigenvalue
# ratio estimator stops early while information criteria recover all eight.
CALIBRATED_SHARES = (0.2, 0.1, 0.02, 0.02, 0.02, 0.018, 0.018, 0.018)
CALIBRATED_MODULI = (0.9, 0.85, 0.85, 0.8, 0.8, 0.85, 0.8, 0.85)
CALIBRATED_FREQS = (2 * np.pi / 20, 0.05, 0.2, 0.4, 0.6, 0.1, 0.8, 0.3)


def _ar2_variance(m, w):
    """Variance of ``x_t = 2m cos(w) x_{t-1} - m^2 x_{t-2} + e_t`` per unit innovation variance."""
    f1, f2 = 2 * m * np.cos(w), -m ** 2
    return (1 - f2) / ((1 + f2) * ((1 - f2) ** 2 - f1 ** 2))


def calibrated_model(
    n: int = 211,
    shares=CALIBRATED_SHARES,
    moduli=CALIBRATED_MODULI,
    freqs=CALIBRATED_FREQS,
    rho_share: float = 0.12,
    nu_share: float = 0.47,
    seed: int = 2024,
) -> DRVARModel:
    """A DRVAR(2) with ``r = len(shares)`` components sized like a quarterly macro panel.

    Each component is an AR(2) with roots ``exp(+-i w)/m``. Component ``k``
    contributes on average ``shares[k]`` to the variance of a series; the
    projection term ``rho xi_t`` and the ignorable errors ``nu_t`` add
    ``rho_share`` and ``nu_share``. Series have roughly unit variance.
    """
    shares, moduli, freqs = (np.asarray(v, dtype=float) for v in (shares, moduli, freqs))
    r = shares.size
    if not (moduli.size == freqs.size == r) or r >= n:
        raise UsageError("shares, moduli and freqs must have equal length r < n")
    if np.any((moduli <= 0) | (moduli >= 1)):
        raise UsageError("moduli must lie in (0, 1)")
    rng = _rng(seed)
    A, _ = np.linalg.qr(rng.standard_normal((n, r)))
    alphas = [np.diag(2 * moduli * np.cos(freqs)), np.diag(-moduli ** 2)]
    s_xi = n * shares / _ar2_variance(moduli, freqs)
    Ap = orthonormal_complement(A)
    rho = Ap @ rng.standard_normal((n - r, r)) * np.sqrt(rho_share * n / ((n - r) * s_xi.sum()))
    C0 = A + rho
    w = rng.uniform(0.5, 1.5, n - r)
    S = C0 @ np.diag(s_xi) @ C0.T + (Ap * (nu_share * n / (n - r) * w)) @ Ap.T
    S = 0.5 * (S + S.T)
    names = tuple(f"s{j + 1:03d}" for j in range(n))
    return DRVARModel(A=A, alphas=alphas, sigma_u=S, delta_u=np.diag(S).copy(),
                      meta={"design": "calibrated"}, names=names)


FIXTURE_TCODES = (1, 2, 4, 5, 6)
FIXTURE_SCALE = 0.005


def quarterly_dates(T: int, start_year: int = 1959) -> tuple:
    return tuple(f"{start_year + q // 4}-{3 * (q % 4) + 1:02d}-01" for q in range(T))


def synthetic_macro_panel(n: int = 211, T: int = 242, r: int = 3, seed: int = 7) -> tuple:
    """Raw-level panel whose transformed version is the artificial design.

    A ``T x n`` draw from the artificial design is multiplied by a common
    constant and integrated according to a tcode cycled from
    ``(1, 2, 4, 5, 6)``, so that applying the codes recovers the scaled draw
    on rows ``3..T`` up to a constant per series. Returns ``(Panel, truth)``.
    """
    panel, truth = generate_dgp(DGPConfig(n=n, r=r, T=T, seed=seed))
    Y = panel.data * FIXTURE_SCALE
    codes = tuple(FIXTURE_TCODES[j % len(FIXTURE_TCODES)] for j in range(n))
    X = np.empty_like(Y)
    for j, code in enumerate(codes):
        y = Y[:, j]
        if code == 1:
            X[:, j] = 10.0 + y
        elif code == 2:
            X[:, j] = 10.0 + np.cumsum(y)
        elif code == 4:
            X[:, j] = 100.0 * np.exp(y)
        elif code == 5:
            X[:, j] = 100.0 * np.exp(np.cumsum(y))
        else:
            X[:, j] = 100.0 * np.exp(np.cumsum(np.cumsum(y)))
    names = tuple(f"s{j + 1:03d}" for j in range(n))
    out = Panel(data=X, names=names, dates=quarterly_dates(T), tcodes=codes)
    return out, truth
