"""Closed-form asymptotic variances at known population values.

These scalar expressions are written in terms of moments of the structural
error ``epsilon = b'v`` and of ``v2_perp = v2 - gamma epsilon``, the part of the
first-stage error uncorrelated with it.  They are used to design and check
Monte Carlo experiments; the estimators themselves use the matrix formulas in
:mod:`manyiv.variance`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ErrorMoments", "error_moments", "v_liml_normal", "v_liml", "emd_gain", "v_emd", "v_umd_pr"]


def _third(P3, x, y, z) -> float:
    return float(np.kron(x, y) @ P3 @ z)


def _fourth(P4, x, y, z, w) -> float:
    return float(np.kron(x, y) @ P4 @ np.kron(z, w))


@dataclass(frozen=True)
class ErrorMoments:
    """Moments of ``(epsilon, v2_perp)`` needed by the variance formulas."""

    bob: float
    gamma: float
    det_omega: float
    e3: float  # E[eps^3]
    e2_v: float  # E[v2_perp eps^2]
    e3_v: float  # E[v2_perp eps^3]
    e2_v2: float  # E[eps^2 v2_perp^2]
    kappa: float  # E[eps^4]/(b'Omega b)^2 - 3
    v2sq_e: float  # E[v2^2 eps]


def error_moments(beta: float, Omega, Psi3, Psi4) -> ErrorMoments:
    Omega = np.asarray(Omega, dtype=float)
    b = np.array([1.0, -beta])
    e2 = np.array([0.0, 1.0])
    bob = float(b @ Omega @ b)
    gamma = float(b @ Omega @ e2) / bob
    c = e2 - gamma * b
    return ErrorMoments(
        bob=bob,
        gamma=gamma,
        det_omega=float(np.linalg.det(Omega)),
        e3=_third(Psi3, b, b, b),
        e2_v=_third(Psi3, b, b, c),
        e3_v=_fourth(Psi4, b, b, b, c),
        e2_v2=_fourth(Psi4, b, b, c, c),
        kappa=_fourth(Psi4, b, b, b, b) / bob**2 - 3.0,
        v2sq_e=_third(Psi3, e2, e2, b),
    )


def _tau(alpha_k, alpha_l):
    return alpha_k * (1.0 - alpha_l) / (1.0 - alpha_k - alpha_l)


def v_liml_normal(beta: float, Omega, lam: float, alpha_k: float, alpha_l: float = 0.0) -> float:
    """``b'Omega b a'Omega^{-1}a / lam * (1 + tau / lam)``."""
    Omega = np.asarray(Omega, dtype=float)
    a = np.array([beta, 1.0])
    b = np.array([1.0, -beta])
    aoa = float(a @ np.linalg.solve(Omega, a))
    return float(b @ Omega @ b) * aoa / lam * (1.0 + _tau(alpha_k, alpha_l) / lam)


def _xi22(beta, Omega, lam):
    a = np.array([beta, 1.0])
    return lam / float(a @ np.linalg.solve(np.asarray(Omega, dtype=float), a))


def v_liml(beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4) -> float:
    """LIML variance including skewness and kurtosis corrections.

    `alpha_delta` is ``(K/n) delta`` and `mu` the limit of
    ``pi_x' Z' diag(H) / sqrt(n K)``.
    """
    m = error_moments(beta, Omega, Psi3, Psi4)
    xi = _xi22(beta, Omega, lam)
    base = v_liml_normal(beta, Omega, lam, alpha_k, alpha_l)
    skew = 2.0 * np.sqrt(alpha_k) * mu / xi**2 * m.e2_v
    kurt = alpha_delta / xi**2 * (m.e2_v2 - m.det_omega)
    return float(base + skew + kurt)


def emd_gain(beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4) -> float:
    """Reduction in asymptotic variance of EMD relative to LIML (non-negative)."""
    m = error_moments(beta, Omega, Psi3, Psi4)
    xi = _xi22(beta, Omega, lam)
    denom = 2.0 * _tau(alpha_k, alpha_l) + alpha_delta * m.kappa
    num = (np.sqrt(alpha_k) * mu * m.e3 + alpha_delta * m.e3_v) ** 2
    return float(num / (xi**2 * m.bob**2 * denom))


def v_emd(beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4) -> float:
    args = (beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4)
    return v_liml(*args) - emd_gain(*args)


def v_umd_pr(beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4) -> float:
    """UMD variance when the rank restriction holds.

    Equals the EMD variance plus the loss from ignoring the restriction.
    """
    args = (beta, Omega, lam, alpha_k, alpha_l, alpha_delta, mu, Psi3, Psi4)
    m = error_moments(beta, Omega, Psi3, Psi4)
    xi = _xi22(beta, Omega, lam)
    denom = 2.0 * _tau(alpha_k, alpha_l) + alpha_delta * m.kappa
    num = (m.bob**2 * m.gamma * denom + np.sqrt(alpha_k) * mu * m.e3 + alpha_delta * m.e3_v) ** 2
    return float(v_emd(*args) + num / (xi**2 * m.bob**2 * denom))
