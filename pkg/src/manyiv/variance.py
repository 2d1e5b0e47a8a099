"""Variance of the moment conditions and standard errors.

The moment vector is ``vech(T - (K/n) S - Xi)``.  Its variance combines a
Normal-theory part, a kurtosis part weighted by the leverage imbalance
``sum_i H_ii^2 / n`` and a skewness part driven by ``Pi' Z' diag(H) / n``:

``Delta = L2 (D1 + D2 + D3 + D3') L2'`` with

* ``D1 = 2 N2 (Xi kron Omega + Omega kron Xi + tau Omega kron Omega)``,
* ``D2 = (K/n) delta [Psi4 - vec(Omega) vec(Omega)' - 2 N2 (Omega kron Omega)]``,
* ``D3 = 2 N2 (Psi3' kron mbar)``,

where ``Psi3 = E[(vv') kron v]`` and ``Psi4 = E[(vv') kron (vv')]``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDesign, Unidentified, WeakInstruments
from .estimators import FitResult, Kind
from .matcalc import D2, L2, N2, vec
from .reduce import DesignDiagnostics, SuffStats

__all__ = [
    "SEMethod",
    "SEResult",
    "MomentVariance",
    "psi_moments",
    "moment_variance",
    "regularize_psd",
    "delta_hat",
    "jacobian",
    "sandwich_variance",
    "efficient_variance",
    "umd_gradient",
    "se_hessian_re",
    "se_sandwich_liml",
    "se_emd",
    "se_umd",
    "kappa_hat",
    "normal_psi4",
]

_E1 = np.array([1.0, 0.0])


class SEMethod(str, enum.Enum):
    HESSIAN_RE = "HESSIAN_RE"
    SANDWICH_LIML = "SANDWICH_LIML"
    EMD = "EMD"
    UMD = "UMD"


@dataclass(frozen=True)
class SEResult:
    """Estimated asymptotic variance of ``sqrt(n)(beta_hat - beta)`` and the standard error."""

    variance_n: float
    se: float
    method: SEMethod
    n: int

    @classmethod
    def make(cls, variance_n: float, n: int, method: SEMethod) -> "SEResult":
        if not (np.isfinite(variance_n) and variance_n > 0):
            raise Unidentified(f"{method.value} variance is not positive ({variance_n:.3g})")
        return cls(float(variance_n), math.sqrt(variance_n / n), method, n)

    def ci95(self, beta_hat: float) -> tuple[float, float]:
        half = 1.959963984540054 * self.se
        return beta_hat - half, beta_hat + half


@dataclass(frozen=True)
class MomentVariance:
    """Estimated third and fourth moments and the moment-condition variance.

    Attributes
    ----------
    Psi3_hat : ndarray, shape (4, 2)
    Psi4_hat : ndarray, shape (4, 4)
    Delta_hat : ndarray, shape (3, 3)
        Symmetric; positive definite after regularization.
    Delta_components : tuple of ndarray
        The 4x4 matrices ``(D1, D2, D3)``.
    regularized : bool
        Whether eigenvalues were floored to make `Delta_hat` positive definite.
    umd_variant : bool
        Whether the unrestricted ``Xi`` and ``mbar`` were used.
    n : int
    """

    Psi3_hat: np.ndarray
    Psi4_hat: np.ndarray
    Delta_hat: np.ndarray
    Delta_components: tuple
    regularized: bool
    umd_variant: bool
    n: int


def normal_psi4(Omega) -> np.ndarray:
    """Fourth-moment matrix of a Normal vector with covariance `Omega`."""
    Omega = np.asarray(Omega, dtype=float)
    vo = vec(Omega)
    return 2.0 * N2 @ np.kron(Omega, Omega) + np.outer(vo, vo)


_PERMS4 = list(itertools.permutations(range(4)))
_PERMS3 = list(itertools.permutations(range(3)))


def _symmetrize_psi4(P4: np.ndarray) -> np.ndarray:
    # rows index (i, j) and columns (k, l) of v_i v_j v_k v_l
    t = P4.reshape(2, 2, 2, 2)
    return (sum(np.transpose(t, p) for p in _PERMS4) / 24.0).reshape(4, 4)


def _symmetrize_psi3(P3: np.ndarray) -> np.ndarray:
    t = P3.reshape(2, 2, 2)
    return (sum(np.transpose(t, p) for p in _PERMS3) / 6.0).reshape(4, 2)


def psi_moments(dd: DesignDiagnostics, Omega_hat) -> tuple[np.ndarray, np.ndarray]:
    """Estimates of ``Psi3`` (4x2) and ``Psi4`` (4x4) from the residuals ``MY``.

    Both are unbiased under i.i.d. errors once the annihilator power sums
    are accounted for.

    Raises
    ------
    DegenerateDesign
        If ``sum M_ij^3`` or ``sum M_ij^4`` is at most ``1e-10 n`` in magnitude.
    """
    n = dd.n
    if not (abs(dd.m3sum) > 1e-10 * n and abs(dd.m4sum) > 1e-10 * n):
        raise DegenerateDesign("annihilator power sums are too close to zero")
    Omega_hat = np.asarray(Omega_hat, dtype=float)
    V = dd.resid
    vv = np.einsum("ti,tj->tij", V, V).reshape(n, 4)
    P3 = vv.T @ V / dd.m3sum
    raw4 = vv.T @ vv
    P4 = (raw4 - (dd.mii2sum - dd.m4sum) * normal_psi4(Omega_hat)) / dd.m4sum
    return _symmetrize_psi3(P3), _symmetrize_psi4(P4)


def moment_variance(Omega, Xi, tau: float, alpha_delta: float, Psi3, Psi4, mbar):
    """``Delta`` and its components for given population quantities.

    Parameters
    ----------
    Omega, Xi : ndarray, shape (2, 2)
    tau : float
        ``tr(H^2)/n``, equal to ``(K/n)(1 - L/n)/(1 - K/n - L/n)``.
    alpha_delta : float
        ``sum_i H_ii^2 / n``.
    Psi3 : ndarray, shape (4, 2)
    Psi4 : ndarray, shape (4, 4)
    mbar : ndarray, shape (2,)
        ``Pi' Z' diag(H) / n``; equals ``sqrt(K/n) mu a`` when ``Xi`` has rank one.

    Returns
    -------
    Delta : ndarray, shape (3, 3)
    components : tuple of three 4x4 arrays
    """
    Omega = np.asarray(Omega, dtype=float)
    Xi = np.asarray(Xi, dtype=float)
    Psi3 = np.asarray(Psi3, dtype=float)
    Psi4 = np.asarray(Psi4, dtype=float)
    mbar = np.asarray(mbar, dtype=float).reshape(2, 1)
    OO = np.kron(Omega, Omega)
    vo = vec(Omega)
    d1 = 2.0 * N2 @ (np.kron(Xi, Omega) + np.kron(Omega, Xi) + tau * OO)
    d2 = alpha_delta * (Psi4 - np.outer(vo, vo) - 2.0 * N2 @ OO)
    d3 = 2.0 * N2 @ np.kron(Psi3.T, mbar)
    delta = L2 @ (d1 + d2 + d3 + d3.T) @ L2.T
    return 0.5 * (delta + delta.T), (d1, d2, d3)


def regularize_psd(A, rel_floor: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Floor eigenvalues of symmetric `A` so the smallest is ``>= rel_floor * trace / dim``.

    The trace is that of the returned matrix.
    """
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    w, U = np.linalg.eigh(A)
    dim = A.shape[0]
    # relative to the trace after flooring, which is at most sum(w+) + dim*floor
    floor = rel_floor * float(np.sum(np.maximum(w, 0.0))) / (dim * (1.0 - rel_floor))
    if floor <= 0:
        floor = rel_floor * max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    if np.all(w >= floor):
        return A, False
    w = np.maximum(w, floor)
    B = (U * w) @ U.T
    return 0.5 * (B + B.T), True


def delta_hat(
    ss: SuffStats,
    dd: DesignDiagnostics,
    fit: FitResult,
    *,
    umd_variant: bool | None = None,
    psi: tuple | None = None,
) -> MomentVariance:
    """Plug-in estimate of the moment-condition variance.

    The rank-restricted version uses ``Xi22_hat a a'`` and
    ``sqrt(K/n) mu_hat a``; the unrestricted version (default for UMD fits)
    uses ``T - (K/n) S`` and ``mbar_hat``.  `psi` may supply precomputed
    ``(Psi3_hat, Psi4_hat)``.
    """
    if umd_variant is None:
        umd_variant = fit.kind == Kind.UMD
    Omega = np.asarray(fit.Omega_hat, dtype=float)
    P3, P4 = psi if psi is not None else psi_moments(dd, Omega)
    if umd_variant:
        Xi = ss.T - ss.alpha_k * ss.S
        mbar = dd.mbar_hat
    else:
        a = fit.a
        Xi = fit.Xi22_hat * np.outer(a, a)
        mbar = math.sqrt(ss.alpha_k) * dd.mu_hat * a
    delta, comps = moment_variance(Omega, Xi, ss.tau, dd.alpha_delta, P3, P4, mbar)
    delta, reg = regularize_psd(delta)
    return MomentVariance(P3, P4, delta, comps, reg, bool(umd_variant), ss.n)


def jacobian(beta: float, Xi22: float) -> np.ndarray:
    """Derivative of ``vech(Xi22 a a')`` with respect to ``(beta, Xi22)``, shape (3, 2)."""
    a = np.array([beta, 1.0])
    col1 = Xi22 * (np.kron(a, _E1) + np.kron(_E1, a))
    col2 = np.kron(a, a)
    return L2 @ np.column_stack([col1, col2])


def _solve_sym(A, B):
    A = np.asarray(A, dtype=float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise Unidentified("singular system in variance formula")
    return np.linalg.solve(A, B)


def sandwich_variance(G, Wmat, Delta) -> np.ndarray:
    """``(G'WG)^{-1} G'W Delta W G (G'WG)^{-1}``."""
    GW = G.T @ Wmat
    bread = _solve_sym(GW @ G, np.eye(G.shape[1]))
    V = bread @ GW @ Delta @ GW.T @ bread
    return 0.5 * (V + V.T)


def efficient_variance(G, Delta) -> np.ndarray:
    """``(G' Delta^{-1} G)^{-1}``."""
    DiG = _solve_sym(Delta, G)
    V = _solve_sym(G.T @ DiG, np.eye(G.shape[1]))
    return 0.5 * (V + V.T)


def umd_gradient(beta: float, Xi22: float) -> np.ndarray:
    """Gradient of ``Xi12 / Xi22`` with respect to ``vech(Xi)``."""
    return np.array([0.0, 1.0 / Xi22, -beta / Xi22])


def _omega_weight(Omega) -> np.ndarray:
    oi = np.linalg.inv(np.asarray(Omega, dtype=float))
    W = D2.T @ np.kron(oi, oi) @ D2
    return 0.5 * (W + W.T)


def se_hessian_re(ss: SuffStats, fit: FitResult) -> SEResult:
    """Inverse-Hessian standard error of the random-effects likelihood.

    Consistent under Normal errors.

    Raises
    ------
    WeakInstruments
        If ``lambda_hat = 0``.
    """
    if fit.kind != Kind.LIML_RE:
        raise ValueError("Hessian standard errors require a LIML/RE fit")
    lam = fit.lambda_hat
    if not lam > 0:
        raise WeakInstruments("lambda_hat is zero; the RE Hessian is singular")
    Omega = fit.Omega_hat
    a, b = fit.a, fit.b
    bob = float(b @ Omega @ b)
    aoa = float(a @ np.linalg.solve(Omega, a))
    qs = float(b @ ss.T @ b) / bob
    ak = ss.alpha_k
    c = lam * qs / ((ak + lam) * (1.0 - ss.alpha_l))
    inner = qs * Omega[1, 1] - ss.T[1, 1] + c / (1.0 - c) * qs / aoa
    h11 = bob * (lam + ak) / (ss.n * lam) / inner
    return SEResult.make(-ss.n * h11, ss.n, SEMethod.HESSIAN_RE)


def se_sandwich_liml(ss: SuffStats, dd: DesignDiagnostics, fit: FitResult, mv: MomentVariance) -> SEResult:
    """Sandwich standard error of LIML that is robust to non-Normal errors."""
    G = jacobian(fit.beta_hat, fit.Xi22_hat)
    V = sandwich_variance(G, _omega_weight(fit.Omega_hat), mv.Delta_hat)
    return SEResult.make(V[0, 0], ss.n, SEMethod.SANDWICH_LIML)


def se_emd(fit: FitResult, mv: MomentVariance, *, fallback: FitResult | None = None) -> SEResult:
    """Efficient standard error ``(G' Delta^{-1} G)^{-1}`` evaluated at `fit`.

    If the EMD fit sits on ``Xi22 = 0`` the Jacobian is rank deficient and
    `fallback` (typically the RE fit) supplies the evaluation point.
    """
    point = fit
    if not fit.Xi22_hat > 0 and fallback is not None:
        point = fallback
    G = jacobian(point.beta_hat, point.Xi22_hat)
    V = efficient_variance(G, mv.Delta_hat)
    return SEResult.make(V[0, 0], mv.n, SEMethod.EMD)


def se_umd(ss: SuffStats, dd: DesignDiagnostics, fit: FitResult, mv_umd: MomentVariance) -> SEResult:
    """Standard error of the unrestricted MD estimator, valid without the rank restriction."""
    xi22 = fit.Xi22_hat
    if not xi22 > 1e-10 * ss.S[1, 1]:
        raise Unidentified("Xi22_hat is not bounded away from zero")
    g = umd_gradient(fit.beta_hat, xi22)
    return SEResult.make(float(g @ mv_umd.Delta_hat @ g), ss.n, SEMethod.UMD)


def kappa_hat(beta: float, Omega, Psi4, *, floor: float = -2.0) -> float:
    """Excess kurtosis of ``epsilon = b'v``: ``(b kron b)' Psi4 (b kron b) / (b'Omega b)^2 - 3``.

    Floored at `floor`, the smallest excess kurtosis any distribution can have.
    """
    b = np.array([1.0, -beta])
    bb = np.kron(b, b)
    bob = float(b @ np.asarray(Omega, dtype=float) @ b)
    k = float(bb @ np.asarray(Psi4, dtype=float) @ bb) / bob**2 - 3.0
    return max(k, floor)
