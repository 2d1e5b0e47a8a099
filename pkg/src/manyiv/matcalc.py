"""Small-matrix calculus for the 2x2 case.

vec/vech operators, the duplication, elimination, symmetrizer and
commutation matrices for d = 2, and closed-form solutions of the symmetric
generalized eigenproblem ``det(T - m S) = 0``.

Conventions: ``vec`` stacks columns (Fortran order), so that
``vec(A C B) = (B' kron A) vec(C)`` with :func:`numpy.kron`; ``vech`` of a
symmetric matrix is ``(a11, a21, a22)``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import DegenerateS

__all__ = [
    "D2",
    "L2",
    "N2",
    "K22",
    "vec",
    "vech",
    "unvech",
    "sym2",
    "GenEigs",
    "gen_eigs_2x2",
    "q_s",
    "q_t",
    "identities_check",
]

# duplication: D2 @ vech(A) = vec(A)
D2 = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)
# elimination: L2 @ vec(A) = vech(A)
L2 = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
# commutation: K22 @ vec(A) = vec(A')
K22 = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
# symmetrizer: N2 @ vec(B) = vec(B + B') / 2
N2 = 0.5 * (np.eye(4) + K22)

for _m in (D2, L2, K22, N2):
    _m.setflags(write=False)
del _m


def vec(A) -> np.ndarray:
    """Stack the columns of `A` into a single vector."""
    return np.asarray(A, dtype=float).flatten(order="F")


def vech(A) -> np.ndarray:
    """Return ``(a11, a21, a22)`` for a 2x2 matrix `A`.

    Only the lower triangle is read, so for a symmetric matrix this removes
    the duplicated off-diagonal entry.
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2):
        raise ValueError(f"vech expects a 2x2 matrix, got shape {A.shape}")
    return np.array([A[0, 0], A[1, 0], A[1, 1]])


def unvech(v) -> np.ndarray:
    """Inverse of :func:`vech` for symmetric matrices."""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"unvech expects a vector of length 3, got shape {v.shape}")
    return np.array([[v[0], v[1]], [v[1], v[2]]])


def sym2(a11: float, a12: float, a22: float) -> np.ndarray:
    """Build the symmetric matrix ``[[a11, a12], [a12, a22]]``."""
    return np.array([[a11, a12], [a12, a22]], dtype=float)


class GenEigs(NamedTuple):
    m_min: float
    m_max: float
    psi_max: np.ndarray


def _check_pd(S: np.ndarray, tol: float) -> float:
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    scale = float(np.sum(S * S))
    if not det > tol * scale or S[0, 0] <= 0:
        raise DegenerateS(f"S is singular or not positive definite (det={det:.3g})")
    return det


def _null_vector(A: np.ndarray) -> np.ndarray:
    # null vector of a (numerically) rank-one symmetric 2x2; use the row with
    # the larger norm to avoid cancellation
    r0 = np.array([-A[0, 1], A[0, 0]])
    r1 = np.array([A[1, 1], -A[1, 0]])
    v = r0 if np.hypot(*r0) >= np.hypot(*r1) else r1
    if not np.any(v):
        # A == 0: every vector is a null vector
        v = np.array([0.0, 1.0])
    return v


def _normalize_psi(v: np.ndarray) -> np.ndarray:
    if abs(v[1]) > 1e-14 * np.hypot(*v):
        return v / v[1]
    return v / v[0]


def gen_eigs_2x2(S, T, *, tol: float = 1e-12, disc_tol: float = 1e-14) -> GenEigs:
    """Roots of ``det(T - m S) = 0`` and the eigenvector for the larger root.

    Parameters
    ----------
    S : array_like, shape (2, 2)
        Symmetric positive definite matrix.
    T : array_like, shape (2, 2)
        Symmetric positive semi-definite matrix.
    tol : float
        `S` is declared singular when ``det(S) <= tol * ||S||_F^2``.
    disc_tol : float
        Relative tolerance below which a negative discriminant is treated as
        rounding error and clamped to zero.

    Returns
    -------
    GenEigs
        ``(m_min, m_max, psi_max)`` where ``S^{-1} T psi_max = m_max psi_max``
        and `psi_max` has second coordinate one (first coordinate one if the
        second vanishes).

    Raises
    ------
    DegenerateS
        If `S` is singular or not positive definite.
    """
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    det_s = _check_pd(S, tol)
    # det(T - mS) = det_s m^2 - b m + det_t
    b = T[0, 0] * S[1, 1] + T[1, 1] * S[0, 0] - 2.0 * T[0, 1] * S[0, 1]
    det_t = T[0, 0] * T[1, 1] - T[0, 1] * T[1, 0]
    disc = b * b - 4.0 * det_s * det_t
    if disc < 0:
        if disc < -disc_tol * max(b * b, abs(4.0 * det_s * det_t), 1e-300):
            raise ValueError("complex generalized eigenvalues; T is not symmetric")
        disc = 0.0
    sq = math.sqrt(disc)
    # larger-magnitude root first, the other one via the product of roots
    q = 0.5 * (b + math.copysign(sq, b)) if b != 0 else 0.5 * sq
    if q == 0.0:
        r1 = r2 = 0.0
    else:
        r1 = q / det_s
        r2 = det_t / q
    m_min, m_max = (r1, r2) if r1 <= r2 else (r2, r1)
    psi = _normalize_psi(_null_vector(T - m_max * S))
    return GenEigs(float(m_min), float(m_max), psi)


def q_s(beta: float, Omega, T) -> float:
    """``b'Tb / b'Omega b`` with ``b = (1, -beta)``."""
    b = np.array([1.0, -beta])
    return float(b @ T @ b) / float(b @ Omega @ b)


def q_t(beta: float, Omega, T) -> float:
    """``a'Omega^{-1} T Omega^{-1} a / a'Omega^{-1} a`` with ``a = (beta, 1)``."""
    a = np.array([beta, 1.0])
    oa = np.linalg.solve(Omega, a)
    return float(oa @ T @ oa) / float(a @ oa)


def identities_check(Omega, T, beta: float, *, n: float = 1.0, nu: float = 1.0) -> float:
    """Largest absolute residual of three algebraic identities.

    The identities are ``Q_S + Q_T = tr(Omega^{-1} T)``,
    ``|Omega| a'Omega^{-1}a = b'Omega b`` and
    ``|nT + nu Omega| = (n^2 m_max m_min + nu^2 + n nu tr(Omega^{-1}T)) |Omega|``
    with ``m_min, m_max`` the roots of ``det(T - m Omega) = 0``.
    """
    Omega = np.asarray(Omega, dtype=float)
    T = np.asarray(T, dtype=float)
    a = np.array([beta, 1.0])
    b = np.array([1.0, -beta])
    oinv = np.linalg.inv(Omega)
    tr = float(np.trace(oinv @ T))
    det_o = float(np.linalg.det(Omega))

    r1 = q_s(beta, Omega, T) + q_t(beta, Omega, T) - tr
    r2 = det_o * float(a @ oinv @ a) - float(b @ Omega @ b)
    eig = gen_eigs_2x2(Omega, T)
    lhs = float(np.linalg.det(n * T + nu * Omega))
    rhs = (n * n * eig.m_max * eig.m_min + nu * nu + n * nu * tr) * det_o
    r3 = lhs - rhs
    return max(abs(r1), abs(r2), abs(r3))
