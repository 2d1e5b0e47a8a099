from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from scipy import optimize

from manyiv import asymptotics as asy
from manyiv import estimators as est
from manyiv import mc
from manyiv import variance as var
from manyiv.errors import DegenerateDesign, Unidentified, WeakInstruments
from manyiv.matcalc import D2, L2, N2, vech
from manyiv.reduce import DesignDiagnostics, SuffStats

from conftest import random_pd, random_ss, seeds

OMEGA = np.array([[1.0, 0.5], [0.5, 1.0]])


def population_ss(beta, Omega, lam, n, K, L=0):
    """Sufficient statistics equal to their expectations, so LIML recovers the truth."""
    a = np.array([beta, 1.0])
    xi22 = lam / (a @ np.linalg.solve(Omega, a))
    return SuffStats(xi22 * np.outer(a, a) + K / n * Omega, Omega, n, K, L)


def _omega_weight(Omega):
    oi = np.linalg.inv(Omega)
    return D2.T @ np.kron(oi, oi) @ D2


def test_normal_psi4_entries():
    P4 = var.normal_psi4(OMEGA).reshape(2, 2, 2, 2)
    s = OMEGA
    assert P4[0, 0, 0, 0] == pytest.approx(3 * s[0, 0] ** 2)
    assert P4[0, 0, 1, 1] == pytest.approx(s[0, 0] * s[1, 1] + 2 * s[0, 1] ** 2)
    assert P4[0, 1, 0, 1] == pytest.approx(s[0, 0] * s[1, 1] + 2 * s[0, 1] ** 2)
    assert P4[0, 0, 0, 1] == pytest.approx(3 * s[0, 0] * s[0, 1])


def test_delta_hand_example():
    a = np.array([0.0, 1.0])
    Delta, comps = var.moment_variance(np.eye(2), np.outer(a, a), 1.0, 0.0, np.zeros((4, 2)), var.normal_psi4(np.eye(2)), np.zeros(2))
    assert np.allclose(Delta, np.diag([2.0, 2.0, 6.0]), atol=1e-15)
    expected = L2 @ (2 * N2 @ (np.kron(np.outer(a, a), np.eye(2)) + np.kron(np.eye(2), np.outer(a, a)) + np.eye(4))) @ L2.T
    assert np.allclose(Delta, expected, atol=1e-15)
    assert np.allclose(comps[1], 0) and np.allclose(comps[2], 0)


def test_balanced_design_kills_higher_moment_terms():
    spec = mc.DGPSpec(n=220, K=10, L=1, beta=0.5, lam=1.0, design=mc.DesignSpec("balanced_groups"),
                      error_family=mc.ErrorFamily("two_point", 0.2))
    sim = mc.Simulator(spec)
    d = sim.dataset(np.random.default_rng(0))
    dd = sim.design.diagnostics(d.y, d.x)
    ss = sim.design.suff_stats(d.y, d.x)
    fit = est.liml_re(ss)
    mv = var.delta_hat(ss, dd, fit)
    assert np.allclose(mv.Delta_components[1], 0, atol=1e-20)
    assert np.allclose(mv.Delta_components[2], 0, atol=1e-12)
    a = fit.a
    Xi = fit.Xi22_hat * np.outer(a, a)
    Om = fit.Omega_hat
    d1 = L2 @ (2 * N2 @ (np.kron(Xi, Om) + np.kron(Om, Xi) + ss.tau * np.kron(Om, Om))) @ L2.T
    assert np.allclose(mv.Delta_hat, d1, rtol=1e-12)


def test_psi_moments_guard():
    dd = DesignDiagnostics(0.0, np.zeros(2), 0.0, 0.0, 1.0, 1.0, np.zeros((5, 2)), np.zeros(5), 5, 1, 1)
    with pytest.raises(DegenerateDesign):
        var.psi_moments(dd, np.eye(2))


def _psi_mc(spec, reps, seed):
    sim = mc.Simulator(spec)
    P3s, P4s = [], []
    for r in range(reps):
        Y = sim.draw_Y(np.random.default_rng(mc.rep_seed(seed, r)))
        dd = sim.design.diagnostics(Y[:, 0], Y[:, 1])
        ss = sim.design.suff_stats(Y[:, 0], Y[:, 1])
        p3, p4 = var.psi_moments(dd, ss.S)
        P3s.append(p3)
        P4s.append(p4)
    return np.array(P3s), np.array(P4s)


def test_psi_moments_normal_monte_carlo():
    spec = mc.DGPSpec(n=2000, K=20, L=2, beta=1.0, lam=1.0)
    P3s, P4s = _psi_mc(spec, 40, 1)
    se3 = P3s.std(axis=0, ddof=1) / np.sqrt(len(P3s))
    assert np.all(np.abs(P3s.mean(axis=0)) <= 3 * se3 + 1e-12)
    target = var.normal_psi4(OMEGA)
    se4 = P4s.std(axis=0, ddof=1) / np.sqrt(len(P4s))
    assert np.all(np.abs(P4s.mean(axis=0) - target) <= 3.5 * se4 + 1e-12)


def test_psi_moments_two_point_analytic():
    spec = mc.DGPSpec(n=1500, K=30, L=1, beta=0.0, lam=1.0, error_family=mc.ErrorFamily("two_point", 0.15))
    P3s, P4s = _psi_mc(spec, 40, 2)
    P3, P4 = mc.population_psi(spec)
    se3 = P3s.std(axis=0, ddof=1) / np.sqrt(len(P3s))
    se4 = P4s.std(axis=0, ddof=1) / np.sqrt(len(P4s))
    assert np.all(np.abs(P3s.mean(axis=0) - P3) <= 3.5 * se3)
    assert np.all(np.abs(P4s.mean(axis=0) - P4) <= 3.5 * se4)


def test_psi_estimates_are_symmetric():
    spec = mc.DGPSpec(n=300, K=10, L=1, error_family=mc.ErrorFamily("centered_lognormal", 0.5))
    P3s, P4s = _psi_mc(spec, 1, 3)
    t4 = P4s[0].reshape(2, 2, 2, 2)
    assert np.allclose(t4, t4.transpose(1, 0, 2, 3)) and np.allclose(t4, t4.transpose(2, 3, 0, 1))
    assert np.allclose(t4, t4.transpose(0, 2, 1, 3))
    t3 = P3s[0].reshape(2, 2, 2)
    assert np.allclose(t3, t3.transpose(2, 1, 0)) and np.allclose(t3, t3.transpose(0, 2, 1))


@given(seeds)
def test_jacobian_finite_difference(seed):
    rng = np.random.default_rng(seed)
    beta, xi = rng.normal(scale=2), rng.uniform(0.1, 3)
    f = lambda th: vech(th[1] * np.outer([th[0], 1.0], [th[0], 1.0]))
    h = 1e-6
    num = np.column_stack([(f([beta + h, xi]) - f([beta - h, xi])) / (2 * h), (f([beta, xi + h]) - f([beta, xi - h])) / (2 * h)])
    G = var.jacobian(beta, xi)
    assert np.allclose(G, num, rtol=1e-5, atol=1e-5 * np.abs(G).max())


@given(seeds)
def test_sandwich_collapse(seed):
    rng = np.random.default_rng(seed)
    G = var.jacobian(rng.normal(), rng.uniform(0.2, 2))
    A = rng.standard_normal((3, 3))
    Delta = A @ A.T + 0.1 * np.eye(3)
    Wm = np.linalg.inv(Delta)
    assert np.allclose(var.sandwich_variance(G, Wm, Delta), var.efficient_variance(G, Delta), rtol=1e-9)
    B = rng.standard_normal((3, 3))
    W2 = B @ B.T + 0.1 * np.eye(3)
    bread = np.linalg.inv(G.T @ W2 @ G)
    assert np.allclose(var.sandwich_variance(G, W2, np.linalg.inv(W2)), bread, rtol=1e-9)


def test_regularize_psd():
    A = np.diag([1.0, 0.5, -0.1])
    B, flag = var.regularize_psd(A)
    assert flag
    assert np.linalg.eigvalsh(B).min() >= 1e-10 * np.trace(B) / 3 * (1 - 1e-9)
    C, flag = var.regularize_psd(np.eye(3))
    assert not flag and np.array_equal(C, np.eye(3))


def test_hessian_matches_numerical_hessian():
    rng = np.random.default_rng(4)
    for _ in range(10):
        ss = random_ss(rng)
        fit = est.liml_re(ss)
        se = var.se_hessian_re(ss, fit)
        C = np.linalg.cholesky(fit.Omega_hat)
        theta0 = np.array([fit.beta_hat, fit.lambda_hat, C[0, 0], C[1, 0], C[1, 1]])

        def f(th):
            Ch = np.array([[th[2], 0.0], [th[3], th[4]]])
            return est.re_loglik(th[0], th[1], Ch @ Ch.T, ss)

        h = 1e-4 * np.maximum(1.0, np.abs(theta0))
        H = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                ei, ej = np.eye(5)[i] * h[i], np.eye(5)[j] * h[j]
                H[i, j] = (f(theta0 + ei + ej) - f(theta0 + ei - ej) - f(theta0 - ei + ej) + f(theta0 - ei - ej)) / (4 * h[i] * h[j])
        num = -ss.n * np.linalg.inv(H)[0, 0]
        assert se.variance_n == pytest.approx(num, rel=1e-4)
        assert se.method == var.SEMethod.HESSIAN_RE


def test_hessian_limit_without_many_instruments():
    beta, lam = 0.8, 1.3
    ss = population_ss(beta, OMEGA, lam, n=10**9, K=3)
    fit = est.liml_re(ss)
    a, b = fit.a, fit.b
    naive = (b @ OMEGA @ b) * (a @ np.linalg.solve(OMEGA, a)) / lam
    assert var.se_hessian_re(ss, fit).variance_n == pytest.approx(naive, rel=1e-6)


def test_hessian_weak_instruments():
    S = np.eye(2)
    ss = SuffStats(0.1 * S + 0.01 * np.outer([0.5, 1.0], [0.5, 1.0]), S, 50, 10, 0)
    fit = est.liml_re(ss)
    with pytest.raises(WeakInstruments):
        var.se_hessian_re(ss, fit)


@pytest.mark.parametrize("n,K,L", [(800, 80, 8), (1000, 100, 0), (500, 5, 1)])
def test_normal_sandwich_equals_normal_formula(n, K, L):
    beta, lam = 1.0, 1.0
    ss = population_ss(beta, OMEGA, lam, n, K, L)
    a = np.array([beta, 1.0])
    xi22 = lam / (a @ np.linalg.solve(OMEGA, a))
    Delta, _ = var.moment_variance(OMEGA, xi22 * np.outer(a, a), ss.tau, 0.3, np.zeros((4, 2)), var.normal_psi4(OMEGA), np.zeros(2))
    V = var.sandwich_variance(var.jacobian(beta, xi22), _omega_weight(OMEGA), Delta)[0, 0]
    assert V == pytest.approx(asy.v_liml_normal(beta, OMEGA, lam, K / n, L / n), rel=1e-12)
    # efficient MD attains the same bound under Normality
    assert var.efficient_variance(var.jacobian(beta, xi22), Delta)[0, 0] == pytest.approx(V, rel=1e-10)


@given(seeds)
def test_closed_forms_match_matrix_formulas(seed):
    rng = np.random.default_rng(seed)
    beta, lam = rng.normal(), rng.uniform(0.5, 3)
    Om = random_pd(rng)
    aK, aL = rng.uniform(0.01, 0.3), rng.uniform(0.0, 0.2)
    ad = rng.uniform(0.0, 1.0) * aK * (1 - aL) / (1 - aK - aL)  # sum H_ii^2 <= tr(H^2)
    mu = rng.normal(scale=0.5)
    fam = mc.ErrorFamily("two_point", float(rng.uniform(0.05, 0.4)))
    spec = mc.DGPSpec(n=100, K=5, Omega=tuple(map(tuple, Om)), error_family=fam)
    P3, P4 = mc.population_psi(spec)
    a = np.array([beta, 1.0])
    xi22 = lam / (a @ np.linalg.solve(Om, a))
    tau = aK * (1 - aL) / (1 - aK - aL)
    G = var.jacobian(beta, xi22)
    Delta, _ = var.moment_variance(Om, xi22 * np.outer(a, a), tau, ad, P3, P4, np.sqrt(aK) * mu * a)
    args = (beta, Om, lam, aK, aL, ad, mu, P3, P4)
    v_l = var.sandwich_variance(G, _omega_weight(Om), Delta)[0, 0]
    v_e = var.efficient_variance(G, Delta)[0, 0]
    g = var.umd_gradient(beta, xi22)
    assert v_l == pytest.approx(asy.v_liml(*args), rel=1e-9)
    assert v_e == pytest.approx(asy.v_emd(*args), rel=1e-9)
    assert g @ Delta @ g == pytest.approx(asy.v_umd_pr(*args), rel=1e-9)
    assert asy.emd_gain(*args) >= 0


def test_umd_excess_under_normality():
    beta, lam, aK = 0.5, 1.5, 0.1
    a, b, e2 = np.array([beta, 1.0]), np.array([1.0, -beta]), np.array([0.0, 1.0])
    xi22 = lam / (a @ np.linalg.solve(OMEGA, a))
    Delta, _ = var.moment_variance(OMEGA, xi22 * np.outer(a, a), aK / (1 - aK), 0.0, np.zeros((4, 2)), var.normal_psi4(OMEGA), np.zeros(2))
    g = var.umd_gradient(beta, xi22)
    v_liml = var.sandwich_variance(var.jacobian(beta, xi22), _omega_weight(OMEGA), Delta)[0, 0]
    tau = aK / (1 - aK)
    assert g @ Delta @ g - v_liml == pytest.approx(2 * tau * (e2 @ OMEGA @ b) ** 2 / xi22**2, rel=1e-10)


def _sample(spec, seed):
    sim = mc.Simulator(spec)
    d = sim.dataset(np.random.default_rng(seed))
    return sim.design.suff_stats(d.y, d.x), sim.design.diagnostics(d.y, d.x)


def test_standard_error_methods_on_data():
    spec = mc.DGPSpec(n=400, K=20, L=2, beta=1.0, lam=2.0, error_family=mc.ErrorFamily("centered_lognormal", 0.5),
                      design=mc.DesignSpec("skewed_leverage"))
    ss, dd = _sample(spec, 0)
    fit = est.liml_re(ss)
    mv = var.delta_hat(ss, dd, fit)
    for r in (var.se_hessian_re(ss, fit), var.se_sandwich_liml(ss, dd, fit, mv)):
        assert r.variance_n > 0 and r.se == pytest.approx(np.sqrt(r.variance_n / ss.n))
    fe = est.emd(ss, mv.Delta_hat, Omega_hat=fit.Omega_hat)
    se_e = var.se_emd(fe, mv, fallback=fit)
    G = var.jacobian(fe.beta_hat, fe.Xi22_hat)
    assert se_e.variance_n == pytest.approx(var.efficient_variance(G, mv.Delta_hat)[0, 0], rel=1e-12)
    fu = est.umd(ss)
    mvu = var.delta_hat(ss, dd, fu)
    assert mvu.umd_variant
    se_u = var.se_umd(ss, dd, fu, mvu)
    g = np.array([0.0, 1 / fu.Xi22_hat, -fu.beta_hat / fu.Xi22_hat])
    assert se_u.variance_n == pytest.approx(g @ mvu.Delta_hat @ g, rel=1e-12)
    lo, hi = se_u.ci95(fu.beta_hat)
    assert hi - lo == pytest.approx(2 * 1.959963984540054 * se_u.se)


def test_se_emd_uses_fallback_on_boundary():
    ss = random_ss(np.random.default_rng(1))
    fit = est.liml_re(ss)
    bound = est.FitResult(fit.beta_hat, est.Kind.EMD, 0.0, fit.Omega_hat, 0.0, np.zeros((2, 2)))
    A = np.random.default_rng(2).standard_normal((3, 3))
    Delta = A @ A.T + np.eye(3)
    mv = var.MomentVariance(np.zeros((4, 2)), np.zeros((4, 4)), Delta, (), False, False, ss.n)
    r = var.se_emd(bound, mv, fallback=fit)
    G = var.jacobian(fit.beta_hat, fit.Xi22_hat)
    assert r.variance_n == pytest.approx(var.efficient_variance(G, Delta)[0, 0])
    with pytest.raises(Unidentified):
        var.se_emd(bound, mv)


def test_se_umd_tiny_xi22():
    ss = random_ss(np.random.default_rng(3))
    fu = est.FitResult(0.0, est.Kind.UMD, 0.0, ss.S, 1e-14, np.zeros((2, 2)))
    mv = var.MomentVariance(np.zeros((4, 2)), np.zeros((4, 4)), np.eye(3), (), False, True, ss.n)
    with pytest.raises(Unidentified):
        var.se_umd(ss, None, fu, mv)


def test_kappa_hat():
    assert var.kappa_hat(0.3, OMEGA, var.normal_psi4(OMEGA)) == pytest.approx(0.0, abs=1e-12)
    assert var.kappa_hat(0.3, OMEGA, np.zeros((4, 4))) == -2.0


def test_se_result_rejects_non_positive():
    with pytest.raises(Unidentified):
        var.SEResult.make(-1.0, 10, var.SEMethod.UMD)
