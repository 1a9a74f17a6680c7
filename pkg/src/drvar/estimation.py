"""Estimation of the dimension-reducible VAR.

The model is

    Y_t = sum_{j=1}^{p} A alpha_j A' Y_{t-j} + u_t,

with ``A`` an ``n x r`` loading matrix with orthonormal columns. Writing
``x_t = A'Y_t`` and stacking ``z_t = [x_t', ..., x_{t-p+1}']'`` gives the
matrix regression ``Y = Z alpha A' + u`` where ``alpha`` is ``rp x r`` and
its ``j``-th ``r x r`` block is ``alpha_j'``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DataError, NumericalError, UsageError
from .factor_space import DEFAULT_P0, FactorSpaceEstimate, m_matrix, orthonormal_complement
from .panel import Panel

logger = logging.getLogger(__name__)

PENALTIES = ("AIC", "HQIC", "BIC")
COND_LIMIT = 1e12


def penalty_weight(penalty: str, T: int) -> float:
    """``c_T`` for the named criterion."""
    if penalty == "AIC":
        return 2.0
    if penalty == "HQIC":
        return 2.0 * np.log(np.log(T))
    if penalty == "BIC":
        return float(np.log(T))
    raise UsageError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")


def parameter_count(n: int, q: int, p: int) -> int:
    """Free parameters of a DRVAR with ``q`` dynamic components: ``nq + (p-1)q^2``."""
    return n * q + (p - 1) * q * q


def _data(panel) -> np.ndarray:
    x = panel.data if isinstance(panel, Panel) else np.asarray(panel, dtype=float)
    return x[:, None] if x.ndim == 1 else x


# ----------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class RegressorSet:
    """Response ``Y`` (rows ``y_{p+1}..y_T``) and stacked lags ``Z`` (rows ``z_p..z_{T-1}``)."""

    Y: np.ndarray
    Z: np.ndarray
    r: int
    p: int

    def __post_init__(self):
        if self.Y.shape[0] != self.Z.shape[0]:
            raise UsageError("Y and Z must have the same number of rows")
        if self.Z.shape[1] != self.r * self.p:
            raise UsageError(f"Z must have r*p={self.r * self.p} columns")


def build_regressors(panel, A, p: int) -> RegressorSet:
    Y = _data(panel)
    A = np.asarray(A, dtype=float)
    T, n = Y.shape
    if A.shape[0] != n:
        raise UsageError(f"A has {A.shape[0]} rows but the panel has {n} columns")
    if not 1 <= p < T - 1:
        raise UsageError(f"lag order must satisfy 1 <= p < T-1, got p={p}")
    r = A.shape[1]
    X = Y @ A
    Z = np.empty((T - p, r * p))
    for j in range(p):
        Z[:, j * r : (j + 1) * r] = X[p - 1 - j : T - 1 - j]
    return RegressorSet(Y=Y[p:], Z=Z, r=r, p=p)


def stack_to_alphas(coef: np.ndarray, r: int, p: int) -> list:
    return [coef[j * r : (j + 1) * r].T.copy() for j in range(p)]


def alphas_to_stack(alphas) -> np.ndarray:
    return np.vstack([np.asarray(a).T for a in alphas])


def companion_radius(alphas) -> float:
    """Spectral radius of the companion matrix of ``x_t = sum alpha_j x_{t-j}``."""
    r = alphas[0].shape[0]
    p = len(alphas)
    comp = np.zeros((r * p, r * p))
    comp[:r] = np.hstack(alphas)
    if p > 1:
        comp[r:, :-r] = np.eye(r * (p - 1))
    return float(np.abs(np.linalg.eigvals(comp)).max())


@dataclass
class DRVARModel:
    """A fitted (or specified) dimension-reducible VAR.

    Attributes
    ----------
    A : (n, r) ndarray
        Orthonormal loading matrix.
    alphas : list of (r, r) ndarray
        Coefficients of ``x_t = sum_j alpha_j x_{t-j} + xi_t``.
    sigma_u : (n, n) ndarray
        Residual second-moment matrix ``u'u / (T-p)``.
    delta_u : (n,) ndarray
        Its diagonal.
    residuals : (T-p, n) ndarray or None
    xi : (T-p, r) ndarray or None
        Dynamic errors ``residuals @ A``.
    meta : dict
        ``n, r, p, T, method, iterations, objective_trace, converged``.
    """

    A: np.ndarray
    alphas: list
    sigma_u: Optional[np.ndarray]
    delta_u: np.ndarray
    residuals: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)
    names: Optional[tuple] = None
    standardization: Optional[tuple] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.alphas = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.alphas]
        n, r = self.A.shape
        err = np.abs(self.A.T @ self.A - np.eye(r)).max()
        if err > 1e-10:
            raise UsageError(f"A'A differs from the identity by {err:.2e}")
        for a in self.alphas:
            if a.shape != (r, r):
                raise UsageError(f"alpha blocks must be {r}x{r}, got {a.shape}")
        self.delta_u = np.asarray(self.delta_u, dtype=float)
        if self.sigma_u is not None:
            self.sigma_u = np.asarray(self.sigma_u, dtype=float)
        self.meta = {"n": n, "r": r, "p": len(self.alphas), **self.meta}
        radius = companion_radius(self.alphas)
        if radius >= 1:
            warnings.warn(f"dynamic component is not stationary (companion radius {radius:.4f})")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def p(self) -> int:
        return len(self.alphas)

    def phi(self) -> list:
        """Full-system coefficient matrices ``A alpha_j A'``."""
        return [self.A @ a @ self.A.T for a in self.alphas]

    def stacked_phi(self) -> np.ndarray:
        """``[Phi_1, ..., Phi_p]'`` as an ``np x n`` matrix."""
        return np.vstack([ph.T for ph in self.phi()])

    def companion_radius(self) -> float:
        return companion_radius(self.alphas)

    def residuals_for(self, panel) -> np.ndarray:
        reg = build_regressors(panel, self.A, self.p)
        return reg.Y - reg.Z @ alphas_to_stack(self.alphas) @ self.A.T

    def rotated(self, O) -> "DRVARModel":
        """Observationally equivalent model with ``A O`` and ``O' alpha_j O``."""
        O = np.asarray(O, dtype=float)
        return DRVARModel(
            A=self.A @ O,
            alphas=[O.T @ a @ O for a in self.alphas],
            sigma_u=self.sigma_u,
            delta_u=self.delta_u,
            residuals=self.residuals,
            xi=None if self.residuals is None else self.residuals @ self.A @ O,
            meta=dict(self.meta),
            names=self.names,
            standardization=self.standardization,
        )


# ----------------------------------------------------------------------------
# coefficient estimators


def _zz_solve(Z: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    zz = Z.T @ Z
    cond = np.linalg.cond(zz)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"Z'Z is singular or ill-conditioned (condition {cond:.3e})", condition=cond)
    return linalg.solve(zz, Z.T @ rhs, assume_a="pos")


def ols_alpha(reg: RegressorSet, A) -> list:
    """OLS estimate ``(Z'Z)^{-1} Z'Y A``, returned as ``p`` blocks ``alpha_j``."""
    A = np.asarray(A, dtype=float)
    coef = _zz_solve(reg.Z, reg.Y @ A)
    return stack_to_alphas(coef, reg.r, reg.p)


def _sigma_inv_times(sigma, A) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 1:
        if not np.all(sigma > 0):
            raise UsageError("diagonal covariance must be strictly positive")
        return A / sigma[:, None]
    try:
        cf = linalg.cho_factor(sigma)
    except linalg.LinAlgError:
        raise UsageError("covariance matrix is not positive definite") from None
    return linalg.cho_solve(cf, A)


def gls_alpha(reg: RegressorSet, A, sigma) -> list:
    """GLS estimate ``(Z'Z)^{-1} Z'Y S^{-1} A (A'S^{-1}A)^{-1}``.

    ``sigma`` is either a full ``n x n`` positive definite matrix or a
    length-``n`` vector holding a diagonal.
    """
    A = np.asarray(A, dtype=float)
    W = _sigma_inv_times(sigma, A)
    coef = _zz_solve(reg.Z, reg.Y @ W) @ np.linalg.inv(A.T @ W)
    return stack_to_alphas(coef, reg.r, reg.p)


def _objective(U: np.ndarray, diagonal: bool):
    m = U.shape[0]
    if diagonal:
        d = np.einsum("ti,ti->i", U, U) / m
        if np.any(d <= 0):
            raise NumericalError("a residual variance is zero")
        return d, float(np.sum(np.log(d)))
    s = U.T @ U / m
    sign, logdet = np.linalg.slogdet(s)
    if sign <= 0:
        raise NumericalError("residual covariance is singular; use diagonal mode")
    return s, float(logdet)


@dataclass
class FGLSResult:
    alphas: list
    sigma: np.ndarray
    objective_trace: list
    iterations: int
    converged: bool
    diagonal: bool


def fgls_switching(
    reg: RegressorSet,
    A,
    diagonal: Optional[bool] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    monotone_tol: float = 1e-10,
) -> FGLSResult:
    """Feasible GLS by alternating covariance and coefficient updates.

    Starts from OLS. Each sweep sets the covariance to ``u'u/(T-p)`` (or its
    diagonal) and re-solves GLS given it. The concentrated objective,
    ``ln det`` of the covariance or ``sum ln`` of its diagonal, must not
    increase. Stops once the change is below ``tol`` relative to
    ``max(1, |objective|)``. When ``diagonal`` is None, diagonal mode is used
    whenever ``T - p <= n``.
    """
    A = np.asarray(A, dtype=float)
    m, n = reg.Y.shape
    if diagonal is None:
        diagonal = m <= n
    stack_A = A.T

    alphas = ols_alpha(reg, A)
    U = reg.Y - reg.Z @ alphas_to_stack(alphas) @ stack_A
    sigma, f = _objective(U, diagonal)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_alphas = gls_alpha(reg, A, sigma)
        U = reg.Y - reg.Z @ alphas_to_stack(new_alphas) @ stack_A
        new_sigma, f_new = _objective(U, diagonal)
        if f_new > f + monotone_tol:
            raise NumericalError(
                f"FGLS objective increased from {f!r} to {f_new!r} at iteration {it}"
            )
        trace.append(f_new)
        alphas, sigma = new_alphas, new_sigma
        if abs(f - f_new) <= tol * max(1.0, abs(f)):
            converged = True
            f = f_new
            break
        f = f_new
    if not converged:
        logger.warning("FGLS did not converge in %d iterations", max_iter)
    return FGLSResult(alphas, sigma, trace, it, converged, diagonal)


# ----------------------------------------------------------------------------
# model selection


def information_criterion(residuals, q: int, n: int, T: int, p: int, penalty: str) -> float:
    """``n^{-1} sum_i ln s_i^2 + c_T k / (T n)`` with ``k = nq + (p-1)q^2``.

    ``s_i^2`` is the mean squared residual of equation ``i`` (divisor
    ``T - p``, the number of residual rows).
    """
    U = np.asarray(residuals, dtype=float)
    s2 = np.einsum("ti,ti->i", U, U) / U.shape[0]
    if np.any(s2 <= 0):
        raise NumericalError("zero residual variance; information criterion undefined")
    k = parameter_count(n, q, p)
    return float(np.mean(np.log(s2)) + penalty_weight(penalty, T) * k / (T * n))


@dataclass
class SelectionTable:
    """Information criteria for ``q = 1..R`` dynamic components."""

    q: np.ndarray
    k: np.ndarray
    mean_log_var: np.ndarray
    ic: dict
    n: int
    T: int
    p: int
    method: str

    @property
    def chosen(self) -> dict:
        # argmin returns the first minimiser, so ties go to the smallest q
        return {pen: int(self.q[np.argmin(v)]) for pen, v in self.ic.items()}

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["q", "k", "mean_log_var", *PENALTIES])
            for i, q in enumerate(self.q):
                w.writerow([int(q), int(self.k[i]), repr(float(self.mean_log_var[i]))]
                           + [repr(float(self.ic[pen][i])) for pen in PENALTIES])


def _fit_residuals(reg: RegressorSet, A, method: str, diagonal=None):
    if method == "ols":
        alphas = ols_alpha(reg, A)
        extra = {"iterations": 0, "objective_trace": [], "converged": True}
    elif method == "fgls":
        res = fgls_switching(reg, A, diagonal=diagonal)
        alphas = res.alphas
        extra = {
            "iterations": res.iterations,
            "objective_trace": res.objective_trace,
            "converged": res.converged,
            "diagonal": res.diagonal,
        }
    else:
        raise UsageError(f"method must be 'ols' or 'fgls', got {method!r}")
    U = reg.Y - reg.Z @ alphas_to_stack(alphas) @ np.asarray(A).T
    return alphas, U, extra


def select_rank(
    panel,
    p: int,
    R: int,
    method: str = "ols",
    p0: int = DEFAULT_P0,
    factor_space: Optional[FactorSpaceEstimate] = None,
) -> SelectionTable:
    """Fit the DRVAR with the leading ``q`` eigenvectors for ``q = 1..R`` and tabulate AIC/HQIC/BIC.

    FGLS fits use the diagonal covariance, matching the criterion's fit term.
    """
    Y = _data(panel)
    T, n = Y.shape
    if p < 1:
        raise UsageError(f"p must be at least 1, got {p}")
    if not 1 <= R < n:
        raise UsageError(f"R must satisfy 1 <= R < n={n}, got {R}")
    fs = factor_space if factor_space is not None else m_matrix(Y, p0=p0, R=R)
    if fs.R < R:
        raise UsageError(f"factor-space estimate holds only {fs.R} eigenvectors, need {R}")
    qs = np.arange(1, R + 1)
    mlv = np.empty(R)
    for i, q in enumerate(qs):
        Vq = fs.vectors[:, :q]
        reg = build_regressors(Y, Vq, p)
        _, U, _ = _fit_residuals(reg, Vq, method, diagonal=True)
        s2 = np.einsum("ti,ti->i", U, U) / U.shape[0]
        if np.any(s2 <= 0):
            raise NumericalError("zero residual variance; information criterion undefined")
        mlv[i] = np.mean(np.log(s2))
    k = np.array([parameter_count(n, int(q), p) for q in qs])
    ic = {pen: mlv + penalty_weight(pen, T) * k / (T * n) for pen in PENALTIES}
    return SelectionTable(q=qs, k=k, mean_log_var=mlv, ic=ic, n=n, T=T, p=p, method=method)


@dataclass
class LagTable:
    """VAR order selection for the ``R``-dimensional series ``V_R'Y_t``."""

    lags: np.ndarray
    log_det: np.ndarray
    ic: dict
    coef_norms: np.ndarray

    @property
    def chosen(self) -> dict:
        return {pen: int(self.lags[np.argmin(v)]) for pen, v in self.ic.items()}

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "log_det", *PENALTIES, "coef_norm"])
            for i, lag in enumerate(self.lags):
                w.writerow([int(lag), repr(float(self.log_det[i]))]
                           + [repr(float(self.ic[pen][i])) for pen in PENALTIES]
                           + [repr(float(self.coef_norms[i]))])


def select_lag(panel, V_R, pmax: int) -> LagTable:
    """Standard VAR order selection on ``W_t = V_R'Y_t`` for ``p = 1..pmax``.

    Every order is fitted on the same ``T - pmax`` observations;
    ``IC(p) = ln det S(p) + c_T R^2 p / (T - pmax)``.
    """
    Y = _data(panel)
    T, n = Y.shape
    if not 1 <= pmax < T / 2:
        raise UsageError(f"pmax must satisfy 1 <= pmax < T/2={T / 2}, got {pmax}")
    W = Y @ np.asarray(V_R, dtype=float)
    W = W - W.mean(axis=0)
    R = W.shape[1]
    m = T - pmax
    target = W[pmax:]
    lags = np.arange(1, pmax + 1)
    logdet = np.empty(pmax)
    norms = np.empty(pmax)
    for i, p in enumerate(lags):
        X = np.hstack([W[pmax - j : T - j] for j in range(1, p + 1)])
        coef, *_ = np.linalg.lstsq(X, target, rcond=None)
        U = target - X @ coef
        sign, ld = np.linalg.slogdet(U.T @ U / m)
        if sign <= 0:
            raise NumericalError(f"singular residual covariance at lag {p}")
        logdet[i] = ld
        norms[i] = np.linalg.norm(coef)
    ic = {pen: logdet + penalty_weight(pen, m) * R * R * lags / m for pen in PENALTIES}
    return LagTable(lags=lags, log_det=logdet, ic=ic, coef_norms=norms)


# ----------------------------------------------------------------------------
# fitting, forecasting and fit measures


def fit_drvar(
    panel,
    r: int,
    p: int,
    method: str = "ols",
    p0: int = DEFAULT_P0,
    A=None,
    diagonal: Optional[bool] = None,
    factor_space: Optional[FactorSpaceEstimate] = None,
) -> DRVARModel:
    """Estimate a DRVAR with ``r`` dynamic components and ``p`` lags.

    The loading matrix is the leading-``r`` eigenvector block of M unless
    ``A`` is supplied. ``sigma_u`` is always the full residual second-moment
    matrix; FGLS may still run on its diagonal.
    """
    Y = _data(panel)
    T, n = Y.shape
    if not 1 <= r <= n:
        raise UsageError(f"r must satisfy 1 <= r <= n={n}, got {r}")
    if p < 1:
        raise UsageError(f"p must be at least 1, got {p}")
    if A is None:
        fs = factor_space if factor_space is not None else m_matrix(Y, p0=p0, R=r)
        A = fs.leading(r)
    A = np.asarray(A, dtype=float)
    reg = build_regressors(Y, A, p)
    alphas, U, extra = _fit_residuals(reg, A, method, diagonal=diagonal)
    sigma = U.T @ U / U.shape[0]
    delta = np.diag(sigma).copy()
    if np.any(delta <= 0):
        raise NumericalError("zero residual variance in some equation")
    names = panel.names if isinstance(panel, Panel) else None
    std = panel.standardization if isinstance(panel, Panel) else None
    return DRVARModel(
        A=A,
        alphas=alphas,
        sigma_u=sigma,
        delta_u=delta,
        residuals=U,
        xi=U @ A,
        meta={"T": T, "method": method, "p0": p0, **extra},
        names=names,
        standardization=std,
    )


def forecast(model: DRVARModel, history, k: int, original_units: bool = False) -> np.ndarray:
    """Iterate the small VAR ``k`` steps ahead and map back with ``A``.

    ``history`` holds the last ``p`` observations, oldest first. Returns a
    ``k x n`` array of ``A xhat_{t+1}, ..., A xhat_{t+k}``.
    """
    H = np.asarray(history, dtype=float)
    if H.ndim == 1:
        H = H[None, :]
    if H.shape != (model.p, model.n):
        raise UsageError(f"history must be {model.p} x {model.n}, got {H.shape}")
    if k < 1:
        raise UsageError(f"horizon must be at least 1, got {k}")
    x = list(H @ model.A)
    for _ in range(k):
        x.append(sum(a @ x[-j] for j, a in enumerate(model.alphas, start=1)))
    out = np.array(x[model.p:]) @ model.A.T
    if original_units and model.standardization is not None:
        mean, scale = np.array(model.standardization).T
        out = out * scale + mean
    return out


@dataclass
class FitMetrics:
    r2_yz: np.ndarray
    r2_yxi: np.ndarray
    names: Optional[tuple] = None

    def summary(self) -> dict:
        out = {}
        for key, v in (("R2_YZ", self.r2_yz), ("R2_YXi", self.r2_yxi)):
            q1, q2, q3 = np.percentile(v, [25, 50, 75])
            out[key] = {"mean": float(v.mean()), "Q1": float(q1), "Q2": float(q2), "Q3": float(q3)}
        return out


def fit_metrics(model: DRVARModel, panel, decomposition=None) -> FitMetrics:
    """Per-series predictability ``R2_YZ`` and common-component share ``R2_YXi``.

    ``R2_YZ = 1 - sum u_i^2 / sum (y_i - ybar_i)^2`` (clipped at 0) and
    ``R2_YXi`` is the squared sample correlation of ``y_i`` with
    ``y_i - nu_i``. ``decomposition`` is the output of
    :func:`drvar.structural.common_component_ma`, which supplies ``nu``.
    """
    if decomposition is None:
        raise UsageError("fit_metrics needs the ignorable errors; run common_component_ma first")
    Y = _data(panel)[model.p:]
    U = model.residuals if model.residuals is not None else model.residuals_for(panel)
    if U.shape != Y.shape:
        raise UsageError("model residuals do not match this panel")
    yc = Y - Y.mean(axis=0)
    sst = np.einsum("ti,ti->i", yc, yc)
    if np.any(sst <= 0):
        raise DataError("a series is constant over the estimation sample")
    r2_yz = np.clip(1.0 - np.einsum("ti,ti->i", U, U) / sst, 0.0, 1.0)
    chi = Y - decomposition.nu
    cc = chi - chi.mean(axis=0)
    den = sst * np.einsum("ti,ti->i", cc, cc)
    num = np.einsum("ti,ti->i", yc, cc) ** 2
    r2_yxi = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    r2_yxi = np.clip(r2_yxi, 0.0, 1.0)
    bad = np.flatnonzero(r2_yxi < r2_yz - 1e-10)
    if bad.size:
        raise NumericalError(f"R2_YXi < R2_YZ for series {int(bad[0])}; inconsistent decomposition")
    return FitMetrics(r2_yz=r2_yz, r2_yxi=r2_yxi, names=model.names)


def orthogonalized_components(model: DRVARModel, panel):
    """Contemporaneously uncorrelated split ``Y_t = A x_t + e_t``.

    ``x_t = (A'S^{-1}A)^{-1} A'S^{-1} Y_t`` and
    ``e_t = S A_perp (A_perp' S A_perp)^{-1} A_perp' u_t`` with ``S`` the
    full residual covariance. Both are returned on the residual rows
    ``p+1..T``. Needs ``S`` invertible, hence ``n < T - p``.
    """
    Y = _data(panel)[model.p:]
    U = model.residuals if model.residuals is not None else model.residuals_for(panel)
    S = model.sigma_u
    if S is None or model.n >= U.shape[0]:
        raise NumericalError(
            "full residual covariance is singular (n >= T - p); the diagonal "
            "approximation is not valid for this decomposition"
        )
    A = model.A
    try:
        cf = linalg.cho_factor(S)
    except linalg.LinAlgError:
        raise NumericalError(
            "residual covariance is not positive definite; the diagonal "
            "approximation is not valid for this decomposition"
        ) from None
    SiA = linalg.cho_solve(cf, A)
    x = Y @ SiA @ np.linalg.inv(A.T @ SiA).T
    Ap = orthonormal_complement(A)
    if Ap.shape[1] == 0:
        return x, np.zeros_like(Y)
    SAp = S @ Ap
    e = U @ Ap @ np.linalg.solve(Ap.T @ SAp, SAp.T)
    return x, e
