"""Frequency-domain structural analysis of a fitted DRVAR.

Inverting the small VAR gives ``x_t = gamma(L) xi_t`` with ``xi_t = A'u_t``.
Projecting the static component on ``xi_t`` splits it as
``eps_t = rho xi_t + nu_t`` and yields

    Y_t = C(L) xi_t + nu_t,    C_0 = A + rho,  C_j = A gamma_j,

where ``chi_t = C(L) xi_t`` is the common component and ``nu_t`` are
ignorable errors uncorrelated with ``xi`` at all leads and lags.
Structural shocks are rotations of ``xi_t`` only.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import NumericalError, UsageError
from .estimation import DRVARModel, fit_drvar
from .montecarlo import _rng
from .panel import Panel

logger = logging.getLogger(__name__)

DEFAULT_H = 199
DEFAULT_GRID = 100
BUSINESS_CYCLE = (2 * np.pi / 32, 2 * np.pi / 6)
CONTRIBUTION_SLACK = 0.02


def band_from_periods(short: float, long: float):
    """Convert a band given in periods (e.g. 6 and 32 quarters) to frequencies."""
    lo, hi = sorted((float(short), float(long)))
    if lo <= 2:
        raise UsageError("shortest period must exceed 2")
    return 2 * np.pi / hi, 2 * np.pi / lo


def sign_normalize(V: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    V = np.array(V, dtype=float, copy=True)
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return V


# ----------------------------------------------------------------------------
# moving-average representation


def wold_coefficients(alphas, H: int) -> list:
    """``gamma_0 = I``, ``gamma_h = sum_{j=1}^{min(h,p)} alpha_j gamma_{h-j}``."""
    alphas = [np.atleast_2d(np.asarray(a, dtype=float)) for a in alphas]
    p = len(alphas)
    if H < p:
        raise UsageError(f"truncation H={H} must be at least p={p}")
    r = alphas[0].shape[0]
    gam = [np.eye(r)]
    for h in range(1, H + 1):
        g = np.zeros((r, r))
        for j in range(1, min(h, p) + 1):
            g += alphas[j - 1] @ gam[h - j]
        gam.append(g)
    return gam


@dataclass
class StructuralDecomposition:
    """Truncated ``C(L)`` and the sample split of ``Y`` into ``chi + nu``.

    Attributes
    ----------
    C : (H+1, n, r) ndarray
    rho : (n, r) ndarray
    gamma : (H+1, r, r) ndarray
    sigma_xi : (r, r) ndarray
        ``A' Sigma_u A``.
    A : (n, r) ndarray
    xi : (T-p, r) ndarray
    nu : (T-p, n) ndarray
    chi : (T-p, n) ndarray
    sigma_nu : (n, n) ndarray
    H : int
    """

    C: np.ndarray
    rho: np.ndarray
    gamma: np.ndarray
    sigma_xi: np.ndarray
    A: np.ndarray
    xi: np.ndarray
    nu: np.ndarray
    chi: np.ndarray
    sigma_nu: np.ndarray
    H: int
    dates: Optional[tuple] = None
    names: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @property
    def r(self) -> int:
        return self.C.shape[2]

    def tail_mass(self) -> float:
        """``||C_H|| / max_j ||C_j||``; small values mean the truncation is harmless."""
        norms = np.linalg.norm(self.C, axis=(1, 2))
        return float(norms[-1] / norms.max())

    def transfer(self, omegas) -> np.ndarray:
        """``C(z)`` at ``z = exp(-i w)`` for each ``w``; shape ``(F, n, r)``.

        Uses ``C(z) = rho + A gamma(z)`` so only ``r x r`` polynomials are summed.
        """
        omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
        z = np.exp(-1j * np.outer(omegas, np.arange(self.H + 1)))
        g = np.einsum("fh,hab->fab", z, self.gamma)
        return self.rho[None] + np.einsum("na,fab->fnb", self.A, g)


def common_component_ma(
    model: DRVARModel, panel=None, H: int = DEFAULT_H, sigma_u: Optional[np.ndarray] = None
) -> StructuralDecomposition:
    """Build ``C(L)``, ``rho`` and the ``chi``/``nu`` split for a fitted model.

    ``rho = (I - AA') S A (A'SA)^{-1}`` with ``S`` the full residual
    covariance (override with ``sigma_u``); only the ``r x r`` matrix
    ``A'SA`` is inverted.
    """
    A = model.A
    if model.residuals is not None:
        U = model.residuals
    elif panel is not None:
        U = model.residuals_for(panel)
    else:
        raise UsageError("model has no residuals; pass the panel it was fitted on")
    S = sigma_u if sigma_u is not None else model.sigma_u
    if S is None:
        S = U.T @ U / U.shape[0]
    SA = S @ A
    sigma_xi = A.T @ SA
    sigma_xi = 0.5 * (sigma_xi + sigma_xi.T)
    cond = np.linalg.cond(sigma_xi)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"A' Sigma_u A is ill-conditioned (condition {cond:.3e})", condition=cond)
    rho = np.linalg.solve(sigma_xi, (SA - A @ sigma_xi).T).T
    gamma = np.array(wold_coefficients(model.alphas, H))
    C = np.einsum("na,hab->hnb", A, gamma)
    C[0] = A + rho

    xi = U @ A
    eps = U - xi @ A.T
    nu = eps - xi @ rho.T
    chi = None
    if panel is not None:
        Y = (panel.data if isinstance(panel, Panel) else np.asarray(panel, dtype=float))[model.p:]
        chi = Y - nu
    sigma_nu = nu.T @ nu / nu.shape[0]
    dates = None
    names = model.names
    if isinstance(panel, Panel):
        dates = None if panel.dates is None else panel.dates[model.p:]
        names = panel.names
    return StructuralDecomposition(
        C=C, rho=rho, gamma=gamma, sigma_xi=sigma_xi, A=A, xi=xi, nu=nu,
        chi=chi, sigma_nu=sigma_nu, H=H, dates=dates, names=names,
    )


# ----------------------------------------------------------------------------
# spectra


def spectral_density_common(dec: StructuralDecomposition, omega) -> np.ndarray:
    """``F_chi(w) = (2 pi)^{-1} C(z^{-1}) Sigma_xi C(z)'`` with ``z = exp(-i w)``.

    Scalar ``omega`` gives an ``n x n`` complex matrix; an array gives a stack.
    """
    scalar = np.ndim(omega) == 0
    Cz = dec.transfer(omega)
    F = np.einsum("fna,ab,fmb->fnm", Cz.conj(), dec.sigma_xi, Cz) / (2 * np.pi)
    return F[0] if scalar else F


def _grid(omega0, omega1, grid_points):
    if not 0 <= omega0 < omega1 <= np.pi:
        raise UsageError(f"band must satisfy 0 <= w0 < w1 <= pi, got ({omega0}, {omega1})")
    if grid_points < 2:
        raise UsageError("need at least two grid points")
    w = np.linspace(omega0, omega1, grid_points)
    weights = np.full(grid_points, (omega1 - omega0) / (grid_points - 1))
    weights[[0, -1]] *= 0.5
    return w, weights


def band_covolatility(dec: StructuralDecomposition, omega0=BUSINESS_CYCLE[0], omega1=BUSINESS_CYCLE[1],
                      grid_points: int = DEFAULT_GRID) -> np.ndarray:
    """Trapezoid-rule integral of ``Re F_chi`` over ``[omega0, omega1]``."""
    if not 0 < omega0 < omega1 < np.pi:
        raise UsageError(f"band must satisfy 0 < w0 < w1 < pi, got ({omega0}, {omega1})")
    w, weights = _grid(omega0, omega1, grid_points)
    Cz = dec.transfer(w)
    # Re F summed with weights, without materialising every n x n matrix
    L = np.linalg.cholesky(dec.sigma_xi)
    G = Cz @ L  # (F, n, r)
    Gw = G * np.sqrt(weights)[:, None, None]
    Gr = Gw.real.transpose(1, 0, 2).reshape(dec.n, -1)
    Gi = Gw.imag.transpose(1, 0, 2).reshape(dec.n, -1)
    theta = (Gr @ Gr.T + Gi @ Gi.T) / (2 * np.pi)
    return 0.5 * (theta + theta.T)


# ----------------------------------------------------------------------------
# identification


@dataclass
class ShockIdentification:
    """Rotation of the dynamic errors into orthonormal structural shocks.

    ``u_t = C_chol^{-1} D xi_t`` and ``Psi(L) = C(L) D^{-1} C_chol``.
    """

    scheme: str
    D: np.ndarray
    C_chol: np.ndarray
    Q: Optional[np.ndarray] = None
    band: Optional[tuple] = None
    eigenvalues: Optional[np.ndarray] = None
    shares: Optional[np.ndarray] = None

    @property
    def weights(self) -> np.ndarray:
        """``r x r`` matrix mapping ``xi_t`` to ``u_t``."""
        return linalg.solve_triangular(self.C_chol, self.D, lower=True)

    def shocks(self, xi) -> np.ndarray:
        return np.asarray(xi) @ self.weights.T

    def impact(self) -> np.ndarray:
        """``D^{-1} C_chol``: response of ``xi`` to each shock."""
        return np.linalg.solve(self.D, self.C_chol)


def _cholesky_rotation(D, sigma_xi):
    if np.linalg.cond(D) > 1e12:
        raise NumericalError("D is singular; reorder the variables so the first r rows of C_0 are independent")
    V = D @ sigma_xi @ D.T
    return np.linalg.cholesky(0.5 * (V + V.T))


def recursive_identification(dec: StructuralDecomposition) -> ShockIdentification:
    """Cholesky scheme on the first ``r`` rows of ``C_0``."""
    D = dec.C[0][: dec.r].copy()
    C = _cholesky_rotation(D, dec.sigma_xi)
    return ShockIdentification(scheme="recursive", D=D, C_chol=C)


def mbccs_identification(dec: StructuralDecomposition, band=BUSINESS_CYCLE,
                         grid_points: int = DEFAULT_GRID) -> ShockIdentification:
    """Principal components of the band covolatility of ``chi``.

    ``Q`` holds the ``r`` leading eigenvectors of ``Theta`` (sign-normalised),
    ``D = Q'C_0``; the first shock maximises the band variance of the common
    component.
    """
    theta = band_covolatility(dec, band[0], band[1], grid_points)
    lam, vec = np.linalg.eigh(theta)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam.size > 1 and abs(lam[0] - lam[1]) <= 1e-10 * max(1.0, abs(lam[0])):
        warnings.warn("leading band eigenvalue is repeated; the MBCCS direction is not unique")
    Q = sign_normalize(vec[:, : dec.r])
    total = np.clip(lam, 0.0, None).sum()
    shares = np.clip(lam, 0.0, None) / total if total > 0 else np.zeros_like(lam)
    D = Q.T @ dec.C[0]
    C = _cholesky_rotation(D, dec.sigma_xi)
    return ShockIdentification(scheme="mbccs", D=D, C_chol=C, Q=Q, band=tuple(band),
                               eigenvalues=lam, shares=shares)


def irf(ident: ShockIdentification, dec: StructuralDecomposition, shock_index: int = 0,
        horizons: Optional[int] = None, cumulate: bool = False) -> np.ndarray:
    """Responses ``Psi_h[:, shock]`` for ``h = 0..horizons-1`` (0-based shock index).

    Returns a ``horizons x n`` array, optionally cumulated over horizons.
    """
    if not 0 <= shock_index < dec.r:
        raise UsageError(f"shock_index must be in 0..{dec.r - 1}")
    horizons = dec.H + 1 if horizons is None else int(horizons)
    if not 1 <= horizons <= dec.H + 1:
        raise UsageError(f"horizons must be in 1..{dec.H + 1}")
    b = ident.impact()[:, shock_index]
    out = dec.C[:horizons] @ b
    return np.cumsum(out, axis=0) if cumulate else out


@dataclass
class Contributions:
    """Share of each series' variance due to one shock, in a band and at frequency zero."""

    band: np.ndarray
    zero: np.ndarray
    clipped: np.ndarray
    names: Optional[tuple] = None
    band_limits: tuple = BUSINESS_CYCLE

    def write_csv(self, path, series: Optional[Sequence[int]] = None, label=None) -> None:
        idx = range(len(self.band)) if series is None else list(series)
        names = self.names or [f"y{j + 1}" for j in range(len(self.band))]
        lo, hi = self.band_limits
        band_label = label or f"{2 * np.pi / hi:g}-{2 * np.pi / lo:g}"
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["period"] + [names[j] for j in idx])
            w.writerow([band_label] + [f"{100 * self.band[j]:.1f}" for j in idx])
            w.writerow(["inf"] + [f"{100 * self.zero[j]:.1f}" for j in idx])


def _series_spectrum(dec, w):
    """Diagonal of ``2 pi F_Y(w)`` at each grid point; shape ``(F, n)``."""
    Cz = dec.transfer(w)
    L = np.linalg.cholesky(dec.sigma_xi)
    G = Cz @ L
    return np.einsum("fnb,fnb->fn", G.conj(), G).real + np.diag(dec.sigma_nu)[None, :]


def variance_contributions(ident: ShockIdentification, dec: StructuralDecomposition,
                           band=BUSINESS_CYCLE, shock_index: int = 0,
                           grid_points: int = DEFAULT_GRID) -> Contributions:
    """Band and zero-frequency variance shares of one structural shock.

    Numerator ``int |e_i' Psi_s(z)|^2``, denominator ``2 pi int e_i' F_Y e_i``
    with ``F_Y = F_chi + Sigma_nu / (2 pi)``, both on the same trapezoid grid.
    Values above ``1 + 0.02`` are clipped and flagged.
    """
    w, weights = _grid(band[0], band[1], grid_points)
    b = ident.impact()[:, shock_index]
    num_band = weights @ np.abs(dec.transfer(w) @ b) ** 2
    den_band = weights @ _series_spectrum(dec, w)
    num_zero = np.abs(dec.transfer([0.0])[0] @ b) ** 2
    den_zero = _series_spectrum(dec, [0.0])[0]
    if np.any(den_band <= 0) or np.any(den_zero <= 0):
        raise NumericalError("a series has zero spectral mass; contribution undefined")
    band_frac = num_band / den_band
    zero_frac = num_zero / den_zero
    clipped = (band_frac > 1 + CONTRIBUTION_SLACK) | (zero_frac > 1 + CONTRIBUTION_SLACK)
    if clipped.any():
        logger.warning("%d contribution(s) exceed one; clipped", int(clipped.sum()))
    cap = 1 + CONTRIBUTION_SLACK
    return Contributions(band=np.minimum(band_frac, cap), zero=np.minimum(zero_frac, cap),
                         clipped=clipped, names=dec.names, band_limits=tuple(band))


def nu_contributions(dec: StructuralDecomposition, band=BUSINESS_CYCLE,
                     grid_points: int = DEFAULT_GRID):
    """Band and zero-frequency shares of the ignorable errors."""
    w, weights = _grid(band[0], band[1], grid_points)
    s_nu = np.diag(dec.sigma_nu)
    den_band = weights @ _series_spectrum(dec, w)
    den_zero = _series_spectrum(dec, [0.0])[0]
    return s_nu * weights.sum() / den_band, s_nu / den_zero


def mbccc_series(ident: ShockIdentification, dec: StructuralDecomposition) -> np.ndarray:
    """``Q_1' chi_t``: the leading band principal component of the common component."""
    if ident.Q is None:
        raise UsageError("the MBCCC needs the mbccs scheme")
    if dec.chi is None:
        raise UsageError("decomposition carries no common-component series")
    return dec.chi @ ident.Q[:, 0]


# ----------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    point: dict
    se: dict
    lower: dict
    upper: dict
    replicates: int
    failures: int


def _structural_targets(model, Y, H, band, horizons, grid_points, reference_q=None):
    dec = common_component_ma(model, Y, H=H)
    ident = mbccs_identification(dec, band, grid_points)
    if reference_q is not None and float(ident.Q[:, 0] @ reference_q) < 0:
        # align the first eigenvector with the point estimate
        ident.Q[:, 0] = -ident.Q[:, 0]
        ident.D[0] = -ident.D[0]
        ident.C_chol = _cholesky_rotation(ident.D, dec.sigma_xi)
    contrib = variance_contributions(ident, dec, band, 0, grid_points)
    return {
        "irf": irf(ident, dec, 0, horizons),
        "irf_cum": irf(ident, dec, 0, horizons, cumulate=True),
        "band": contrib.band,
        "zero": contrib.zero,
        "share": np.array([ident.shares[0]]),
    }, ident


def bootstrap_se(model: DRVARModel, panel, B: int = 200, seed=0, H: int = DEFAULT_H,
                 band=BUSINESS_CYCLE, horizons: int = 21, grid_points: int = DEFAULT_GRID,
                 method: Optional[str] = None, p0: Optional[int] = None,
                 max_failure_rate: float = 0.10) -> BootstrapResult:
    """Residual bootstrap of the MBCCS impulse responses and contributions.

    Each replicate resamples residual rows with replacement, rebuilds ``Y``
    from the fitted ``Phi_j = A alpha_j A'`` starting at the first ``p``
    observed rows, refits with the same ``r`` and ``p``, and reruns the
    structural stage. Returns standard deviations and 16/84 percentile bands.
    """
    if B < 50:
        raise UsageError(f"B must be at least 50, got {B}")
    Y = panel.data if isinstance(panel, Panel) else np.asarray(panel, dtype=float)
    U = model.residuals if model.residuals is not None else model.residuals_for(Y)
    method = method or model.meta.get("method", "ols")
    p0 = p0 or model.meta.get("p0", 5)
    r, p = model.r, model.p
    point, ident0 = _structural_targets(model, Y, H, band, horizons, grid_points)
    ref = ident0.Q[:, 0]

    phi = model.phi()
    rng = _rng(seed)
    draws = {k: [] for k in point}
    failures = 0
    m = U.shape[0]
    for _ in range(B):
        idx = rng.integers(0, m, size=m)
        Ub = U[idx]
        Yb = np.empty_like(Y)
        Yb[:p] = Y[:p]
        for t in range(p, Y.shape[0]):
            acc = Ub[t - p].copy()
            for j, ph in enumerate(phi, start=1):
                acc += ph @ Yb[t - j]
            Yb[t] = acc
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mb = fit_drvar(Yb, r, p, method=method, p0=p0)
                tb, _ = _structural_targets(mb, Yb, H, band, horizons, grid_points, reference_q=ref)
        except (NumericalError, UsageError, np.linalg.LinAlgError) as exc:
            logger.debug("bootstrap replicate failed: %s", exc)
            failures += 1
            continue
        for k, v in tb.items():
            draws[k].append(v)
    if failures > max_failure_rate * B:
        raise NumericalError(f"{failures} of {B} bootstrap replicates failed")
    se, lo, hi = {}, {}, {}
    for k, v in draws.items():
        arr = np.array(v)
        se[k] = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros_like(point[k])
        lo[k], hi[k] = np.percentile(arr, [16, 84], axis=0)
    return BootstrapResult(point=point, se=se, lower=lo, upper=hi,
                           replicates=B - failures, failures=failures)


# ----------------------------------------------------------------------------
# exports


def _names(dec, n):
    return list(dec.names) if dec.names is not None else [f"y{j + 1}" for j in range(n)]


def write_spectrum_csv(dec: StructuralDecomposition, path, grid_points: int = 129) -> None:
    """Diagonal of ``F_chi`` on an even grid over ``[0, pi]``."""
    w = np.linspace(0.0, np.pi, grid_points)
    Cz = dec.transfer(w) @ np.linalg.cholesky(dec.sigma_xi)
    dens = np.einsum("fnb,fnb->fn", Cz.conj(), Cz).real / (2 * np.pi)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["frequency"] + _names(dec, dec.n))
        for i, wi in enumerate(w):
            out.writerow([repr(float(wi))] + [repr(float(v)) for v in dens[i]])


def write_shares_csv(ident: ShockIdentification, path) -> None:
    if ident.eigenvalues is None:
        raise UsageError("eigenvalue shares exist only for the mbccs scheme")
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["index", "eigenvalue", "share"])
        for i, (lam, s) in enumerate(zip(ident.eigenvalues, ident.shares), start=1):
            out.writerow([i, repr(float(lam)), repr(float(s))])


def write_irf_csv(responses, path, names=None, lower=None, upper=None) -> None:
    """Horizon-by-series table; bootstrap bands add ``name_lo``/``name_hi`` columns."""
    responses = np.asarray(responses)
    names = names or [f"y{j + 1}" for j in range(responses.shape[1])]
    header = ["horizon"] + list(names)
    if lower is not None:
        header += [f"{s}_lo" for s in names] + [f"{s}_hi" for s in names]
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for h in range(responses.shape[0]):
            row = [h] + [repr(float(v)) for v in responses[h]]
            if lower is not None:
                row += [repr(float(v)) for v in lower[h]] + [repr(float(v)) for v in upper[h]]
            out.writerow(row)


def write_series_csv(values, path, dates=None, label="mbccc") -> None:
    values = np.asarray(values)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", label])
        for t, v in enumerate(values):
            out.writerow([dates[t] if dates is not None else t + 1, repr(float(v))])
