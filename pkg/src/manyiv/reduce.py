"""Data reduction: orthogonalized instruments, sufficient statistics, leverage.

The raw data ``(y, x, W, Z*)`` are reduced to the two 2x2 matrices

* ``T = Pi_hat' Pi_hat / n`` with ``Pi_hat = Z'(y, x)``, and
* ``S = V_hat' V_hat / (n - K - L)``, the residual covariance estimate,

where ``Z`` is an orthonormal basis of the instruments after partialling out
``W``.  :class:`Design` caches everything that depends only on ``(W, Z*)`` so
that Monte Carlo loops over outcomes can reuse the factorization, the
diagonal of ``H`` and the annihilator power sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, RankDeficient, TooLarge
from .matcalc import gen_eigs_2x2

__all__ = [
    "Dataset",
    "Design",
    "SuffStats",
    "DesignDiagnostics",
    "orthogonalize",
    "suff_stats",
    "design_diagnostics",
    "DEFAULT_DENSE_CAP",
]

DEFAULT_DENSE_CAP = 20000
_BLOCK_ELEMENTS = 1 << 22


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Dataset:
    """Raw observations.

    Parameters
    ----------
    y : array_like, shape (n,)
        Outcome.
    x : array_like, shape (n,)
        Endogenous regressor.
    W : array_like, shape (n, L) or None
        Exogenous regressors, including the intercept column if any.
    Zstar : array_like, shape (n, K)
        Excluded instruments.
    """

    y: np.ndarray
    x: np.ndarray
    W: np.ndarray
    Zstar: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(-1)
        n = y.shape[0]
        if x.shape[0] != n:
            raise DataError(f"y and x lengths differ: {n} vs {x.shape[0]}")
        W = _as_matrix(self.W, n, "W")
        Zstar = _as_matrix(self.Zstar, n, "Zstar")
        for name, arr in (("y", y), ("x", x), ("W", W), ("Zstar", Zstar)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        K, L = Zstar.shape[1], W.shape[1]
        if K < 1:
            raise DataError("at least one instrument is required")
        if n <= K + L + 2:
            raise DataError(f"need n > K + L + 2, got n={n}, K={K}, L={L}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Zstar", Zstar)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.Zstar.shape[1]

    @property
    def L(self) -> int:
        return self.W.shape[1]

    @property
    def Y(self) -> np.ndarray:
        return np.column_stack([self.y, self.x])


@dataclass(frozen=True)
class SuffStats:
    """The pair ``(T, S)`` with the sample dimensions.

    ``m_min``, ``m_max`` and ``psi_max`` are derived from ``(S, T)`` on
    construction; building a ``SuffStats`` from a singular ``S`` raises
    :class:`~manyiv.errors.DegenerateS`.
    """

    T: np.ndarray
    S: np.ndarray
    n: int
    K: int
    L: int
    m_min: float = field(init=False)
    m_max: float = field(init=False)
    psi_max: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        T = np.array(self.T, dtype=float)
        S = np.array(self.S, dtype=float)
        if T.shape != (2, 2) or S.shape != (2, 2):
            raise DataError("T and S must be 2x2")
        T = 0.5 * (T + T.T)
        S = 0.5 * (S + S.T)
        if not self.n > self.K + self.L:
            raise DataError("need n > K + L")
        eig = gen_eigs_2x2(S, T)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "m_min", eig.m_min)
        object.__setattr__(self, "m_max", eig.m_max)
        object.__setattr__(self, "psi_max", eig.psi_max)

    @property
    def alpha_k(self) -> float:
        return self.K / self.n

    @property
    def alpha_l(self) -> float:
        return self.L / self.n

    @property
    def dof(self) -> int:
        """Residual degrees of freedom ``n - K - L``."""
        return self.n - self.K - self.L

    @property
    def tau(self) -> float:
        """``tr(H^2)/n = (K/n)(n - L)/(n - K - L)``."""
        return self.K * (self.n - self.L) / (self.n * self.dof)

    @property
    def trace_s_inv_t(self) -> float:
        return self.m_min + self.m_max


@dataclass(frozen=True)
class DesignDiagnostics:
    """Leverage functionals and residual moments.

    Attributes
    ----------
    delta_hat : float
        ``diag(H)'diag(H) / K``.
    mbar_hat : ndarray, shape (2,)
        ``Pi_hat' Z' diag(H) / n``.
    mu_hat : float
        Second component of ``Pi_hat' Z' diag(H) / sqrt(n K)``.
    m3sum, m4sum, mii2sum : float
        ``sum_ij M_ij^3``, ``sum_ij M_ij^4`` and ``sum_i M_ii^2``.
    resid : ndarray, shape (n, 2)
        Reduced-form residuals ``M Y``.
    diag_h : ndarray, shape (n,)
        Diagonal of ``H = ZZ' - K/(n-K-L) M``.
    """

    delta_hat: float
    mbar_hat: np.ndarray
    mu_hat: float
    m3sum: float
    m4sum: float
    mii2sum: float
    resid: np.ndarray = field(repr=False)
    diag_h: np.ndarray = field(repr=False)
    n: int
    K: int
    L: int

    @property
    def m2sum(self) -> float:
        """Alias of :attr:`m3sum`."""
        return self.m3sum

    @property
    def alpha_delta(self) -> float:
        """``(K/n) delta_hat = diag(H)'diag(H) / n``."""
        return self.K * self.delta_hat / self.n


class Design:
    """Factorization of fixed regressors ``(W, Z*)``.

    Parameters
    ----------
    W : array_like, shape (n, L) or None
    Zstar : array_like, shape (n, K)
    rank_tol : float
        Relative tolerance on the diagonal of the triangular factors used to
        detect rank deficiency.
    """

    def __init__(self, W, Zstar, *, rank_tol: float = 1e-10):
        Zstar = np.asarray(Zstar, dtype=float)
        if Zstar.ndim == 1:
            Zstar = Zstar[:, None]
        n = Zstar.shape[0]
        W = _as_matrix(W, n, "W")
        if W.shape[1]:
            QW, RW = np.linalg.qr(W)
            d = np.abs(np.diag(RW))
            scale = np.linalg.norm(W, axis=0)
            bad = np.flatnonzero(d <= rank_tol * np.maximum(scale, 1e-300))
            if bad.size:
                raise RankDeficient(
                    f"exogenous regressors are collinear at column {bad[0]}", "W", int(bad[0])
                )
        else:
            QW = np.zeros((n, 0))
        Zt = Zstar - QW @ (QW.T @ Zstar)
        Zt -= QW @ (QW.T @ Zt)
        Q, R = np.linalg.qr(Zt)
        d = np.diag(R)
        scale = np.linalg.norm(Zstar, axis=0)
        bad = np.flatnonzero(np.abs(d) <= rank_tol * np.maximum(scale, 1e-300))
        if bad.size:
            raise RankDeficient(
                f"instrument column {bad[0]} is collinear with W or earlier instruments",
                "Zstar",
                int(bad[0]),
            )
        # positive diagonal: R is then the Cholesky factor of Zt'Zt
        sign = np.where(d < 0, -1.0, 1.0)
        self.Z = Q * sign
        self.R = R * sign[:, None]
        self.QW = QW
        self.n, self.K, self.L = n, Zstar.shape[1], W.shape[1]
        self._power_sums = None

    @property
    def dof(self) -> int:
        return self.n - self.K - self.L

    @property
    def leverage_z(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.Z, self.Z)

    @property
    def leverage_w(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.QW, self.QW)

    @property
    def m_diag(self) -> np.ndarray:
        return 1.0 - self.leverage_z - self.leverage_w

    @property
    def diag_h(self) -> np.ndarray:
        return self.leverage_z - self.K / self.dof * self.m_diag

    def residuals(self, Y) -> np.ndarray:
        """``M Y``: residuals from regressing `Y` on ``(Z, W)``."""
        Y = np.asarray(Y, dtype=float)
        R = Y - self.Z @ (self.Z.T @ Y)
        if self.L:
            R -= self.QW @ (self.QW.T @ Y)
        return R

    def suff_stats(self, y, x) -> SuffStats:
        Y = np.column_stack([y, x]).astype(float)
        Pi = self.Z.T @ Y
        V = self.residuals(Y)
        T = Pi.T @ Pi / self.n
        S = V.T @ V / self.dof
        return SuffStats(T, S, self.n, self.K, self.L)

    def power_sums(self, *, cap: int = DEFAULT_DENSE_CAP, force: bool = False):
        """``(sum M_ij^3, sum M_ij^4, sum M_ii^2)`` by blocked dense evaluation.

        Memory is O(n) per block row but total work is O(n^2 (K+L)).  Blocks
        are accumulated in a fixed order so the sums are reproducible.
        """
        if self._power_sums is None:
            n = self.n
            if n > cap and not force:
                raise TooLarge(f"n={n} exceeds the dense computation cap {cap}")
            U = np.hstack([self.Z, self.QW])
            block = max(1, _BLOCK_ELEMENTS // n)
            m3 = m4 = 0.0
            for start in range(0, n, block):
                stop = min(n, start + block)
                Mb = -(U[start:stop] @ U.T)
                idx = np.arange(stop - start)
                Mb[idx, start + idx] += 1.0
                Mb2 = Mb * Mb
                m3 += float(np.sum(Mb2 * Mb))
                m4 += float(np.sum(Mb2 * Mb2))
            mii2 = float(np.sum(self.m_diag**2))
            self._power_sums = (m3, m4, mii2)
        return self._power_sums

    def diagnostics(self, y, x, *, cap: int = DEFAULT_DENSE_CAP, force: bool = False) -> DesignDiagnostics:
        Y = np.column_stack([y, x]).astype(float)
        m3, m4, mii2 = self.power_sums(cap=cap, force=force)
        dh = self.diag_h
        Pi = self.Z.T @ Y
        mbar = Pi.T @ (self.Z.T @ dh) / self.n
        return DesignDiagnostics(
            delta_hat=float(dh @ dh) / self.K,
            mbar_hat=mbar,
            mu_hat=float(mbar[1] * np.sqrt(self.n / self.K)),
            m3sum=m3,
            m4sum=m4,
            mii2sum=mii2,
            resid=self.residuals(Y),
            diag_h=dh,
            n=self.n,
            K=self.K,
            L=self.L,
        )


def orthogonalize(d: Dataset) -> tuple[np.ndarray, Design]:
    """Orthonormal instruments ``Z`` (``Z'Z = I``, ``W'Z = 0``) and the design handle."""
    design = Design(d.W, d.Zstar)
    return design.Z, design


def suff_stats(d: Dataset, design: Design | None = None) -> SuffStats:
    design = design or Design(d.W, d.Zstar)
    return design.suff_stats(d.y, d.x)


def design_diagnostics(
    d: Dataset,
    design: Design | None = None,
    *,
    cap: int = DEFAULT_DENSE_CAP,
    force: bool = False,
) -> DesignDiagnostics:
    design = design or Design(d.W, d.Zstar)
    return design.diagnostics(d.y, d.x, cap=cap, force=force)
