"""Point estimators of beta built from the sufficient statistics ``(T, S)``.

* :func:`liml_re` is the eigenvalue closed form of LIML, which is also the
  maximizer of the random-effects likelihood :func:`re_loglik`.
* :func:`md_fit` minimizes the minimum distance objective
  ``vech(T - (K/n)S - Xi22 aa')' W vech(...)`` over ``(beta, Xi22 >= 0)`` for an
  arbitrary weight; :func:`md_re` and :func:`emd` are the two weights of
  interest.
* :func:`umd` leaves ``Xi`` unrestricted, giving the modified bias-corrected
  2SLS estimator, and :func:`psd_mix` imposes only positive semi-definiteness.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import optimize

from .errors import NoConvergence, Unidentified
from .matcalc import D2, q_t, vech
from .reduce import SuffStats

__all__ = [
    "Kind",
    "FitResult",
    "liml_re",
    "re_loglik",
    "md_objective",
    "md_fit",
    "MDSolution",
    "re_weight",
    "md_re",
    "emd",
    "umd",
    "psd_mix",
]


class Kind(str, enum.Enum):
    LIML_RE = "LIML_RE"
    EMD = "EMD"
    UMD = "UMD"
    PSD_MIX = "PSD_MIX"


@dataclass(frozen=True)
class FitResult:
    """Outcome of a point estimator.

    Attributes
    ----------
    beta_hat : float
    kind : Kind
    lambda_hat : float
        Estimated normalized instrument strength ``Xi22 a'Omega^{-1}a``.
    Omega_hat : ndarray, shape (2, 2)
        Reduced-form covariance estimate used downstream by variance formulas.
    Xi22_hat : float
    Xi_hat : ndarray, shape (2, 2)
        ``Xi22_hat a a'`` for rank-restricted fits, the unrestricted estimate
        ``T - (K/n) S`` for UMD.
    se : float or None
    flags : tuple of str
        Boundary and fallback indicators, e.g. ``"lambda_boundary"``.
    diagnostics : dict
        Named scalars such as the objective value and gradient norm.
    """

    beta_hat: float
    kind: Kind
    lambda_hat: float
    Omega_hat: np.ndarray
    Xi22_hat: float
    Xi_hat: np.ndarray
    se: float | None = None
    flags: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def a(self) -> np.ndarray:
        return np.array([self.beta_hat, 1.0])

    @property
    def b(self) -> np.ndarray:
        return np.array([1.0, -self.beta_hat])

    def with_se(self, se: float) -> "FitResult":
        return replace(self, se=float(se))


def _a(beta):
    return np.array([beta, 1.0])


def liml_re(ss: SuffStats) -> FitResult:
    """LIML via the smallest root of ``det(T - m S) = 0`` and the RE estimates.

    Raises
    ------
    Unidentified
        If ``T22 - m_min S22`` vanishes, which includes the tie
        ``m_min = m_max``.
    """
    T, S = ss.T, ss.S
    m = ss.m_min
    den = T[1, 1] - m * S[1, 1]
    scale = max(abs(T[1, 1]), abs(m * S[1, 1]), np.finfo(float).tiny)
    if abs(den) <= 1e-12 * scale or ss.m_max - ss.m_min <= 1e-12 * max(abs(ss.m_max), 1e-300):
        raise Unidentified("LIML denominator T22 - m_min S22 vanishes")
    beta = (T[0, 1] - m * S[0, 1]) / den
    a = _a(beta)
    flags = []
    lam = ss.m_max - ss.alpha_k
    if lam < 0:
        lam = 0.0
        flags.append("lambda_boundary")
    asa = float(a @ np.linalg.solve(S, a))
    Omega = (ss.dof * S + ss.n * (T - lam / asa * np.outer(a, a))) / (ss.n - ss.L)
    Omega = 0.5 * (Omega + Omega.T)
    aoa = float(a @ np.linalg.solve(Omega, a))
    xi22 = lam / aoa
    b = np.array([1.0, -beta])
    diagnostics = {
        "Q_S": float(b @ T @ b) / float(b @ Omega @ b),
        "Xi22_via_S": lam / asa,
    }
    return FitResult(
        beta_hat=float(beta),
        kind=Kind.LIML_RE,
        lambda_hat=float(lam),
        Omega_hat=Omega,
        Xi22_hat=float(xi22),
        Xi_hat=xi22 * np.outer(a, a),
        flags=tuple(flags),
        diagnostics=diagnostics,
    )


def re_loglik(beta: float, lam: float, Omega, ss: SuffStats) -> float:
    """Random-effects log-likelihood, up to a constant that depends only on the data."""
    Omega = np.asarray(Omega, dtype=float)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    sign, logdet = np.linalg.slogdet(Omega)
    if sign <= 0:
        raise ValueError("Omega must be positive definite")
    n, K = ss.n, ss.K
    oinv = np.linalg.inv(Omega)
    value = -0.5 * K * math.log1p(n * lam / K)
    value -= 0.5 * (n - ss.L) * logdet
    value -= 0.5 * float(np.trace(oinv @ (ss.dof * ss.S + n * ss.T)))
    if lam > 0:
        value += 0.5 * n * lam / (ss.alpha_k + lam) * q_t(beta, Omega, ss.T)
    return float(value)


def _check_weight(Wmat) -> np.ndarray:
    Wmat = np.asarray(Wmat, dtype=float)
    if Wmat.shape != (3, 3):
        raise ValueError(f"weight matrix must be 3x3, got {Wmat.shape}")
    return 0.5 * (Wmat + Wmat.T)


def _moment_target(ss: SuffStats) -> np.ndarray:
    return vech(ss.T - ss.alpha_k * ss.S)


def md_objective(beta: float, Xi22: float, ss: SuffStats, Wmat) -> float:
    """``e' W e`` with ``e = vech(T - (K/n) S - Xi22 aa')``."""
    Wmat = _check_weight(Wmat)
    e = _moment_target(ss) - Xi22 * vech(np.outer(_a(beta), _a(beta)))
    return float(e @ Wmat @ e)


def re_weight(S) -> np.ndarray:
    """``D2' (S^{-1} kron S^{-1}) D2``."""
    Sinv = np.linalg.inv(np.asarray(S, dtype=float))
    Wre = D2.T @ np.kron(Sinv, Sinv) @ D2
    return 0.5 * (Wre + Wre.T)


@dataclass(frozen=True)
class MDSolution:
    beta: float
    Xi22: float
    objective: float
    grad_norm: float
    iterations: int
    boundary: bool
    method: str


def _h(beta):
    return np.array([beta * beta, beta, 1.0])


def _h_beta(beta):
    return np.array([2.0 * beta, 1.0, 0.0])


_H_BB = np.array([2.0, 0.0, 0.0])


def _grad_hess(x, g, Wmat):
    beta, xi = x
    h, hb = _h(beta), _h_beta(beta)
    e = g - xi * h
    We = Wmat @ e
    Wh = Wmat @ h
    grad = np.array([-2.0 * xi * (hb @ We), -2.0 * (h @ We)])
    hess = np.empty((2, 2))
    hess[0, 0] = 2.0 * xi * xi * (hb @ Wmat @ hb) - 2.0 * xi * (_H_BB @ We)
    hess[0, 1] = hess[1, 0] = -2.0 * (hb @ We) + 2.0 * xi * (hb @ Wh)
    hess[1, 1] = 2.0 * (h @ Wh)
    return float(e @ We), grad, hess


def _grad_floor(x, g, Wmat) -> float:
    # size of the rounding error in the gradient; for very large |beta| this
    # exceeds any fixed tolerance because h(beta) grows like beta^2
    beta, xi = x
    h = _h(beta)
    wn = float(np.linalg.norm(Wmat, 2))
    e_scale = float(np.linalg.norm(g)) + abs(xi) * float(np.linalg.norm(h))
    return 64.0 * np.finfo(float).eps * wn * e_scale * float(np.linalg.norm(h)) * max(1.0, abs(xi))


def _converged(x, q, grad, g, Wmat, tol) -> bool:
    gn = float(np.linalg.norm(grad))
    return gn <= max(tol * (1.0 + abs(q)), _grad_floor(x, g, Wmat))


def _profile_candidates(g, Wmat):
    """Stationary points of ``p / sqrt(w)`` with ``p = h'Wg`` and ``w = h'Wh``.

    Minimizing over ``Xi22 >= 0`` for fixed beta gives ``Xi22 = max(0, p/w)``
    and objective ``g'Wg - max(0, p)^2 / w``; the global minimum therefore
    sits at the maximizer of ``p / sqrt(w)``.  Coefficients are in increasing
    powers of beta.
    """
    c = Wmat @ g
    p = np.array([c[2], c[1], c[0]])
    # w(beta) = sum_jk W_jk h_j h_k with h = (beta^2, beta, 1)
    w = np.zeros(5)
    pw = (2, 1, 0)
    for j in range(3):
        for k in range(3):
            w[pw[j] + pw[k]] += Wmat[j, k]
    num = P.polysub(2.0 * P.polymul(P.polyder(p), w), P.polymul(p, P.polyder(w)))
    num = P.polytrim(num, tol=0.0)
    if num.size <= 1 or not np.any(num):
        roots = np.array([])
    else:
        big = np.max(np.abs(num))
        num = P.polytrim(np.where(np.abs(num) <= 1e-14 * big, 0.0, num), tol=0.0)
        roots = P.polyroots(num) if num.size > 1 else np.array([])
    real = [float(r.real) for r in roots if abs(r.imag) <= 1e-8 * (1.0 + abs(r))]
    return p, w, real


def _ratio(p, w, beta):
    wv = P.polyval(beta, w)
    if wv <= 0:
        return -np.inf
    return P.polyval(beta, p) / math.sqrt(wv)


def md_fit(
    ss: SuffStats,
    Wmat,
    *,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> MDSolution:
    """Minimize the MD objective over ``(beta, Xi22 >= 0)``.

    The concentrated problem in beta is solved globally through the roots of
    a quartic, then the joint problem is polished by Newton iterations using
    the analytic gradient and Hessian, falling back to a trust-region solver.

    Raises
    ------
    Unidentified
        If the concentrated objective is minimized only as ``|beta| -> inf``.
    NoConvergence
        If the gradient norm does not fall below ``tol * (1 + |Q|)``, or below
        the floating-point noise level of the gradient when that is larger.
    """
    Wmat = _check_weight(Wmat)
    g = _moment_target(ss)
    p, w, roots = _profile_candidates(g, Wmat)
    vals = [(_ratio(p, w, r), r) for r in roots]
    vals = [v for v in vals if np.isfinite(v[0])]
    limit = p[2] / math.sqrt(w[4]) if w[4] > 0 else -np.inf
    if not vals:
        raise Unidentified("MD objective has no finite minimizer in beta")
    best, beta0 = max(vals)
    if limit > best + 1e-12 * (1.0 + abs(best)):
        raise Unidentified("MD objective is minimized only as |beta| grows without bound")
    xi0 = max(0.0, P.polyval(beta0, p) / P.polyval(beta0, w))

    if xi0 <= 0.0:
        # Xi22 = 0 is optimal for every beta; report the limiting beta
        q = float(g @ Wmat @ g)
        _, grad, _ = _grad_hess((beta0, 0.0), g, Wmat)
        # only the Xi22 direction matters and it points into the constraint
        proj = max(0.0, -grad[1])
        return MDSolution(beta0, 0.0, q, proj, 0, True, "profile")

    x = np.array([beta0, xi0])
    q, grad, hess = _grad_hess(x, g, Wmat)
    it = 0
    method = "newton"
    while not _converged(x, q, grad, g, Wmat, tol) and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        x_new = x + step
        if x_new[1] < 0:
            break
        q_new, g_new, h_new = _grad_hess(x_new, g, Wmat)
        if q_new > q + 1e-12 * (1.0 + abs(q)):
            break
        moved = np.max(np.abs(step)) > 4 * np.finfo(float).eps * (1.0 + np.max(np.abs(x)))
        x, q, grad, hess = x_new, q_new, g_new, h_new
        if not moved:
            break
    if not _converged(x, q, grad, g, Wmat, tol):
        method = "trust-region"
        res = optimize.minimize(
            lambda z: _grad_hess(z, g, Wmat)[0],
            x,
            jac=lambda z: _grad_hess(z, g, Wmat)[1],
            hess=lambda z: _grad_hess(z, g, Wmat)[2],
            method="trust-exact",
            options={"gtol": tol, "maxiter": max_iter},
        )
        cand = np.asarray(res.x, dtype=float)
        if cand[1] >= 0:
            q_c, g_c, _ = _grad_hess(cand, g, Wmat)
            if q_c <= q or np.linalg.norm(g_c) < np.linalg.norm(grad):
                x, q, grad = cand, q_c, g_c
                it += int(res.nit)
    gn = float(np.linalg.norm(grad))
    if not _converged(x, q, grad, g, Wmat, tol):
        best_sol = MDSolution(float(x[0]), float(x[1]), q, gn, it, False, method)
        raise NoConvergence(f"MD solver stopped with gradient norm {gn:.3g}", best=best_sol)
    return MDSolution(float(x[0]), float(x[1]), float(q), gn, it, False, method)


def md_re(ss: SuffStats) -> FitResult:
    """MD estimator with weight ``D2'(S^{-1} kron S^{-1})D2``.

    Its beta coincides with LIML.  ``Omega_hat`` is ``S`` and
    ``lambda_hat = Xi22_hat a'S^{-1}a``.  The fit carries the flag
    ``"trace_boundary"`` when ``tr(S^{-1}T) < 2K/n``.
    """
    sol = md_fit(ss, re_weight(ss.S))
    flags = []
    if ss.trace_s_inv_t < 2 * ss.alpha_k:
        flags.append("trace_boundary")
    if sol.boundary:
        flags.append("xi_boundary")
    a = _a(sol.beta)
    asa = float(a @ np.linalg.solve(ss.S, a))
    return FitResult(
        beta_hat=sol.beta,
        kind=Kind.LIML_RE,
        lambda_hat=sol.Xi22 * asa,
        Omega_hat=ss.S.copy(),
        Xi22_hat=sol.Xi22,
        Xi_hat=sol.Xi22 * np.outer(a, a),
        flags=tuple(flags),
        diagnostics=_md_diag(sol),
    )


def _md_diag(sol: MDSolution) -> dict:
    return {
        "objective": sol.objective,
        "grad_norm": sol.grad_norm,
        "iterations": float(sol.iterations),
    }


def emd(ss: SuffStats, Delta_hat, *, Omega_hat=None) -> FitResult:
    """Efficient MD estimator with weight ``Delta_hat^{-1}``.

    `Omega_hat` is carried into the result for downstream variance formulas;
    it defaults to the RE estimate.
    """
    Delta_hat = np.asarray(Delta_hat, dtype=float)
    Wmat = np.linalg.solve(Delta_hat, np.eye(3))
    sol = md_fit(ss, Wmat)
    if Omega_hat is None:
        Omega_hat = liml_re(ss).Omega_hat
    Omega_hat = np.asarray(Omega_hat, dtype=float)
    a = _a(sol.beta)
    aoa = float(a @ np.linalg.solve(Omega_hat, a))
    flags = ("xi_boundary",) if sol.boundary else ()
    diag = _md_diag(sol)
    diag["solver"] = sol.method
    return FitResult(
        beta_hat=sol.beta,
        kind=Kind.EMD,
        lambda_hat=sol.Xi22 * aoa,
        Omega_hat=Omega_hat,
        Xi22_hat=sol.Xi22,
        Xi_hat=sol.Xi22 * np.outer(a, a),
        flags=flags,
        diagnostics=diag,
    )


def umd(ss: SuffStats) -> FitResult:
    """Unrestricted MD: ``beta = (T12 - (K/n)S12) / (T22 - (K/n)S22)``."""
    Xi = ss.T - ss.alpha_k * ss.S
    den = Xi[1, 1]
    if not abs(den) > 1e-12 * ss.S[1, 1]:
        raise Unidentified("T22 - (K/n) S22 is numerically zero")
    beta = Xi[0, 1] / den
    a = _a(beta)
    asa = float(a @ np.linalg.solve(ss.S, a))
    return FitResult(
        beta_hat=float(beta),
        kind=Kind.UMD,
        lambda_hat=max(0.0, float(den) * asa),
        Omega_hat=ss.S.copy(),
        Xi22_hat=float(den),
        Xi_hat=Xi,
        flags=("xi22_negative",) if den < 0 else (),
    )


def _is_psd2(X, tol: float = 0.0) -> bool:
    det = X[0, 0] * X[1, 1] - X[0, 1] * X[1, 0]
    return X[0, 0] >= -tol and X[1, 1] >= -tol and det >= -tol


def psd_mix(ss: SuffStats, Wmat=None) -> FitResult:
    """UMD when ``T - (K/n)S`` is positive semi-definite, rank-restricted MD otherwise.

    `Wmat` defaults to the RE weight.  No standard error is defined for this
    estimator.
    """
    Xi = ss.T - ss.alpha_k * ss.S
    if _is_psd2(Xi):
        fit = umd(ss)
        return replace(fit, kind=Kind.PSD_MIX, flags=fit.flags + ("interior",))
    Wmat = re_weight(ss.S) if Wmat is None else Wmat
    sol = md_fit(ss, Wmat)
    a = _a(sol.beta)
    asa = float(a @ np.linalg.solve(ss.S, a))
    flags = ("boundary",) + (("xi_boundary",) if sol.boundary else ())
    return FitResult(
        beta_hat=sol.beta,
        kind=Kind.PSD_MIX,
        lambda_hat=sol.Xi22 * asa,
        Omega_hat=ss.S.copy(),
        Xi22_hat=sol.Xi22,
        Xi_hat=sol.Xi22 * np.outer(a, a),
        flags=flags,
        diagnostics=_md_diag(sol),
    )
