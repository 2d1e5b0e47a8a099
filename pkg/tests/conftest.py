from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from manyiv.reduce import Dataset, SuffStats

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_pd(rng, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((2, 2))
    return scale * (A @ A.T + 0.2 * np.eye(2))


def random_psd(rng) -> np.ndarray:
    A = rng.standard_normal((2, 2))
    return A @ A.T


def random_ss(rng, *, n=None, K=None, L=None, strong: bool = True) -> SuffStats:
    """Admissible random sufficient statistics (S PD, T PSD)."""
    n = int(n if n is not None else rng.integers(50, 2000))
    K = int(K if K is not None else rng.integers(2, max(3, n // 4)))
    L = int(L if L is not None else rng.integers(0, max(1, n // 10)))
    S = random_pd(rng)
    beta = rng.normal(scale=2.0)
    a = np.array([beta, 1.0])
    xi = rng.uniform(0.05, 3.0) if strong else 0.0
    noise = random_psd(rng) * rng.uniform(0.0, 0.2)
    T = K / n * S + xi * np.outer(a, a) + noise
    return SuffStats(T, S, n, K, L)


def random_dataset(rng, n=80, K=6, L=2, beta=1.0, strength=1.0) -> Dataset:
    W = np.column_stack([np.ones(n), rng.standard_normal((n, L - 1))]) if L else np.zeros((n, 0))
    Zs = rng.standard_normal((n, K))
    pi = strength * np.ones(K) / np.sqrt(K)
    v = rng.standard_normal((n, 2)) @ np.linalg.cholesky(np.array([[1, 0.5], [0.5, 1]])).T
    x = Zs @ pi + (W @ rng.standard_normal(L) if L else 0) + v[:, 1]
    y = beta * x + (W @ rng.standard_normal(L) if L else 0) + v[:, 0]
    return Dataset(y, x, W, Zs)


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE_RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'} - {detail}")
