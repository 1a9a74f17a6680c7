"""Loading-space estimation from squared autocovariances.

The loading space of the dynamic component is spanned by the leading
eigenvectors of

    M = sum_{j=1}^{p0} S(j) S(j)'

where ``S(j)`` is the lag-``j`` sample autocovariance. The number of dynamic
components is estimated from the minimum ratio of consecutive eigenvalues.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, UsageError
from .panel import Panel

DEFAULT_P0 = 5
DEFAULT_R = 14


def _as_array(panel) -> np.ndarray:
    x = panel.data if isinstance(panel, Panel) else np.asarray(panel, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class FactorSpaceEstimate:
    """Eigen-decomposition of the M matrix.

    Attributes
    ----------
    m_hat : (n, n) ndarray
    eigenvalues : (n,) ndarray
        Descending, clamped at zero.
    vectors : (n, R) ndarray
        Leading ``R`` orthonormal eigenvectors.
    p0 : int
    R : int
    """

    m_hat: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray
    p0: int
    R: int

    def leading(self, q: int) -> np.ndarray:
        """The ``n x q`` block of leading eigenvectors."""
        if not 1 <= q <= self.R:
            raise UsageError(f"q must be in 1..{self.R}, got {q}")
        return self.vectors[:, :q]

    def ratio_table(self):
        """Rows ``(index, lambda, lambda_{i+1}/lambda_i)``; last ratio is NaN."""
        lam = self.eigenvalues
        rows = []
        for i in range(len(lam)):
            ratio = lam[i + 1] / lam[i] if i + 1 < len(lam) and lam[i] > 0 else float("nan")
            rows.append((i + 1, float(lam[i]), float(ratio)))
        return rows

    def write_scree(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "lambda", "ratio"])
            for i, lam, ratio in self.ratio_table():
                w.writerow([i, repr(lam), "" if np.isnan(ratio) else repr(ratio)])


def autocovariance(panel, j: int) -> np.ndarray:
    """Sample autocovariance at lag ``j``.

    ``T^{-1} sum_{t=j+1}^{T} (Y_t - Ybar)(Y_{t-j} - Ybar)'`` with the full
    sample mean and divisor ``T`` for every lag.
    """
    x = _as_array(panel)
    T = x.shape[0]
    if not 0 <= j < T:
        raise UsageError(f"lag must satisfy 0 <= j < T={T}, got {j}")
    xc = x - x.mean(axis=0)
    return xc[j:].T @ xc[: T - j] / T


def m_matrix(panel, p0: int = DEFAULT_P0, R: int | None = None) -> FactorSpaceEstimate:
    """Build M from lags ``1..p0`` and eigen-decompose it.

    ``R`` defaults to ``min(DEFAULT_R, n)`` and is clipped at ``n``.
    """
    x = _as_array(panel)
    T, n = x.shape
    if not 1 <= p0 < T:
        raise UsageError(f"p0 must satisfy 1 <= p0 < T={T}, got {p0}")
    R = min(DEFAULT_R if R is None else int(R), n)
    if R < 1:
        raise UsageError("R must be at least 1")
    xc = x - x.mean(axis=0)
    m = np.zeros((n, n))
    # summed in lag order so results do not depend on evaluation order
    for j in range(1, p0 + 1):
        s = xc[j:].T @ xc[: T - j] / T
        m += s @ s.T
    m = 0.5 * (m + m.T)
    lam, vec = np.linalg.eigh(m)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[-1] < -1e-10 * max(1.0, lam[0]):
        raise NumericalError(f"M matrix has a negative eigenvalue {lam[-1]:.3e}")
    lam = np.clip(lam, 0.0, None)
    return FactorSpaceEstimate(m_hat=m, eigenvalues=lam, vectors=vec[:, :R].copy(), p0=p0, R=R)


def ly_rank(eigenvalues, R: int) -> int:
    """Index of the smallest ratio ``lambda_{i+1}/lambda_i`` over ``i = 1..R``.

    Ratios with a zero denominator are excluded; ties go to the smallest
    index.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if R < 1:
        raise UsageError(f"R must be at least 1, got {R}")
    if R + 1 > lam.size:
        raise UsageError(f"need R+1={R + 1} eigenvalues, got {lam.size}")
    ratios = np.full(R, np.inf)
    den = lam[:R]
    ok = den > 0
    ratios[ok] = lam[1 : R + 1][ok] / den[ok]
    if not np.isfinite(ratios).any():
        raise NumericalError("all eigenvalues are zero; rank undefined")
    return int(np.argmin(ratios)) + 1


def _check_orthonormal(M, name, tol=1e-8):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise UsageError(f"{name} must be a matrix")
    err = np.abs(M.T @ M - np.eye(M.shape[1])).max()
    if err > tol:
        raise UsageError(f"{name} columns are not orthonormal (max error {err:.2e})")
    return M


def subspace_distance(A, B) -> float:
    """``sqrt(1 - lambda_min(B'AA'B))`` for orthonormal ``A`` and ``B``.

    Zero iff the column spaces coincide, one if some direction of ``B`` is
    orthogonal to the span of ``A``.
    """
    A = _check_orthonormal(A, "A")
    B = _check_orthonormal(B, "B")
    if A.shape != B.shape:
        raise UsageError(f"shape mismatch: {A.shape} vs {B.shape}")
    G = B.T @ A
    lam = np.linalg.eigvalsh(G @ G.T)[0]
    return float(np.sqrt(np.clip(1.0 - lam, 0.0, 1.0)))


def orthonormal_complement(A) -> np.ndarray:
    """An ``n x (n-r)`` orthonormal basis of the null space of ``A'``."""
    A = np.asarray(A, dtype=float)
    n, r = A.shape
    if r >= n:
        return np.zeros((n, 0))
    q, _ = np.linalg.qr(A, mode="complete")
    return q[:, r:]
