from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from scipy.stats import ortho_group

from manyiv import mc
from manyiv.errors import DataError, DegenerateS, RankDeficient, TooLarge
from manyiv.reduce import Dataset, Design, design_diagnostics, orthogonalize, suff_stats

from conftest import random_dataset, seeds

DATA = Path(__file__).parent / "data"


def hand6() -> Dataset:
    raw = np.loadtxt(DATA / "hand6.csv", delimiter=",", skiprows=1)
    return Dataset(raw[:, 0], raw[:, 1], np.ones((6, 1)), raw[:, 2:3])


def test_dataset_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(DataError):
        Dataset(np.zeros(5), np.zeros(5), np.ones((5, 1)), rng.standard_normal((5, 2)))
    with pytest.raises(DataError):
        Dataset(np.zeros(10), np.zeros(10), None, np.zeros((10, 0)))
    y = rng.standard_normal(10)
    y[3] = np.nan
    with pytest.raises(DataError):
        Dataset(y, np.zeros(10), None, rng.standard_normal((10, 2)))
    with pytest.raises(DataError):
        Dataset(np.zeros(10), np.zeros(9), None, rng.standard_normal((10, 2)))


def test_hand_fixture_suff_stats():
    ss = suff_stats(hand6())
    assert np.allclose(ss.T, [[1.5, 1.0], [1.0, 2.0 / 3.0]], atol=1e-13)
    assert np.allclose(ss.S, [[2.125, 1.0], [1.0, 5.0 / 6.0]], atol=1e-13)
    assert (ss.n, ss.K, ss.L) == (6, 1, 1)


def test_hand_fixture_power_sums_match_loops():
    d = hand6()
    z = d.Zstar[:, 0] - d.Zstar[:, 0].mean()
    n = d.n
    M = [[(1.0 if i == j else 0.0) - 1.0 / n - z[i] * z[j] / (z @ z) for j in range(n)] for i in range(n)]
    m3 = sum(M[i][j] ** 3 for i in range(n) for j in range(n))
    m4 = sum(M[i][j] ** 4 for i in range(n) for j in range(n))
    mii2 = sum(M[i][i] ** 2 for i in range(n))
    dd = design_diagnostics(d)
    assert dd.m3sum == pytest.approx(m3, rel=1e-12)
    assert dd.m2sum == dd.m3sum
    assert dd.m4sum == pytest.approx(m4, rel=1e-12)
    assert dd.mii2sum == pytest.approx(mii2, rel=1e-12)
    lev = [z[i] ** 2 / (z @ z) for i in range(n)]
    dh = [lev[i] - 1.0 / (n - 2) * M[i][i] for i in range(n)]
    assert np.allclose(dd.diag_h, dh, atol=1e-14)
    assert dd.delta_hat == pytest.approx(sum(h * h for h in dh), rel=1e-12)


def test_orthogonalize_orthonormal_input_without_w():
    rng = np.random.default_rng(1)
    Q = np.linalg.qr(rng.standard_normal((30, 4)))[0]
    d = Dataset(rng.standard_normal(30), rng.standard_normal(30), None, Q)
    Z, _ = orthogonalize(d)
    signs = np.sign(np.sum(Z * Q, axis=0))
    assert np.allclose(Z, Q * signs, atol=1e-12)


def test_orthogonalize_single_instrument_with_intercept():
    rng = np.random.default_rng(2)
    z = rng.standard_normal(25)
    d = Dataset(rng.standard_normal(25), rng.standard_normal(25), np.ones((25, 1)), z[:, None])
    Z, _ = orthogonalize(d)
    zc = (z - z.mean()) / np.linalg.norm(z - z.mean())
    assert min(np.abs(Z[:, 0] - zc).max(), np.abs(Z[:, 0] + zc).max()) <= 1e-12


@given(seeds)
def test_orthogonalize_properties(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, n=50, K=5, L=3)
    Z, design = orthogonalize(d)
    assert np.allclose(Z.T @ Z, np.eye(5), atol=1e-10)
    assert np.allclose(d.W.T @ Z, 0, atol=1e-10)
    # same span as the W-residualized instruments
    Zt = d.Zstar - d.W @ np.linalg.lstsq(d.W, d.Zstar, rcond=None)[0]
    assert np.allclose(Z @ (Z.T @ Zt), Zt, atol=1e-10)
    # annihilator kills Z and W
    assert np.allclose(design.residuals(Z[:, :2]), 0, atol=1e-8)
    assert np.allclose(design.residuals(d.W), 0, atol=1e-8)


def test_rank_deficiency_is_located():
    rng = np.random.default_rng(3)
    Zs = rng.standard_normal((40, 4))
    Zs[:, 2] = Zs[:, 0] + Zs[:, 1]
    with pytest.raises(RankDeficient) as exc:
        Design(np.ones((40, 1)), Zs)
    assert exc.value.which == "Zstar" and exc.value.column == 2
    W = np.column_stack([np.ones(40), np.ones(40) * 2])
    with pytest.raises(RankDeficient) as exc:
        Design(W, rng.standard_normal((40, 2)))
    assert exc.value.which == "W" and exc.value.column == 1
    Zs = rng.standard_normal((40, 2))
    Zs[:, 1] = 3.0
    with pytest.raises(RankDeficient):
        Design(np.ones((40, 1)), Zs)


def test_collinear_endogenous_block():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(40)
    with pytest.raises(DegenerateS):
        suff_stats(Dataset(x, x, np.ones((40, 1)), rng.standard_normal((40, 3))))


@given(seeds)
def test_rotation_invariance_of_suff_stats(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, n=60, K=6, L=2)
    Q = ortho_group.rvs(6, random_state=rng)
    A = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    base = suff_stats(d)
    for Zs in (d.Zstar @ Q, d.Zstar @ A, d.Zstar + d.W @ rng.standard_normal((2, 6))):
        ss = suff_stats(Dataset(d.y, d.x, d.W, Zs))
        assert np.allclose(ss.T, base.T, atol=1e-10)
        assert np.allclose(ss.S, base.S, atol=1e-10)


@given(seeds)
def test_diagnostic_invariants(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, n=40, K=int(rng.integers(1, 10)), L=int(rng.integers(0, 4)))
    dd = design_diagnostics(d)
    assert abs(dd.diag_h.sum()) <= 1e-8
    bound = (1 - d.L / d.n) * d.n / (d.n - d.K - d.L)
    assert 0 <= dd.delta_hat < bound
    assert dd.alpha_delta == pytest.approx(dd.diag_h @ dd.diag_h / d.n)
    Pi = orthogonalize(d)[0].T @ d.Y
    assert np.allclose(dd.mbar_hat, Pi.T @ (orthogonalize(d)[0].T @ dd.diag_h) / d.n)
    assert dd.mu_hat == pytest.approx(dd.mbar_hat[1] * np.sqrt(d.n / d.K))


def test_balanced_groups_have_zero_delta():
    spec = mc.DGPSpec(n=120, K=11, L=1, design=mc.DesignSpec("balanced_groups"))
    d = mc.generate(spec, 0)
    dd = design_diagnostics(d)
    assert dd.delta_hat == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(dd.diag_h, 0, atol=1e-13)


def test_power_sums_cap_and_force():
    rng = np.random.default_rng(5)
    d = random_dataset(rng, n=60, K=4, L=1)
    design = Design(d.W, d.Zstar)
    with pytest.raises(TooLarge):
        design.power_sums(cap=50)
    forced = design.power_sums(cap=50, force=True)
    assert forced == Design(d.W, d.Zstar).power_sums()


def test_power_sums_independent_of_block_size(monkeypatch):
    from manyiv import reduce

    rng = np.random.default_rng(6)
    d = random_dataset(rng, n=300, K=20, L=3)
    ref = Design(d.W, d.Zstar).power_sums()
    monkeypatch.setattr(reduce, "_BLOCK_ELEMENTS", 300 * 7)
    blocked = Design(d.W, d.Zstar).power_sums()
    assert np.allclose(blocked, ref, rtol=1e-12)
    design = Design(d.W, d.Zstar)
    U = np.hstack([design.Z, design.QW])
    M = np.eye(300) - U @ U.T
    assert np.allclose(ref, [np.sum(M**3), np.sum(M**4), np.sum(np.diag(M) ** 2)], rtol=1e-10)


def test_s_is_unbiased_in_monte_carlo():
    spec = mc.DGPSpec(n=100, K=5, L=2, beta=0.5, lam=1.0)
    sim = mc.Simulator(spec)
    draws = []
    for r in range(400):
        Y = sim.draw_Y(np.random.default_rng(mc.rep_seed(9, r)))
        draws.append(sim.design.suff_stats(Y[:, 0], Y[:, 1]).S.ravel())
    draws = np.array(draws)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - spec.Omega_array.ravel()) <= 3 * se)
