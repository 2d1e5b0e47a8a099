"""Tests of the proportionality restriction (overidentifying restrictions).

All statistics depend on the data only through ``m_min``, the smallest root of
``det(T - m S) = 0``, and the sample dimensions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from scipy import stats

from .errors import JustIdentified
from .estimators import FitResult
from .reduce import DesignDiagnostics, SuffStats
from .variance import kappa_hat

__all__ = [
    "TestMethod",
    "TestResult",
    "j_md",
    "cd_adjusted_level",
    "modified_cd_test",
    "sargan_test",
    "md_j_test",
    "kappa_hat",
]


class TestMethod(str, enum.Enum):
    MD_J = "MD_J"
    MODIFIED_CD = "MODIFIED_CD"
    SARGAN = "SARGAN"


@dataclass(frozen=True)
class TestResult:
    """Outcome of a test; ``reject`` is ``statistic > critical_value``."""

    __test__ = False  # keep pytest from collecting this class

    statistic: float
    critical_value: float
    p_value: float | None
    nominal_size: float
    reject: bool
    method: TestMethod
    details: dict = field(default_factory=dict)


def _check_nominal(nominal: float) -> None:
    if not 0.0 < nominal < 1.0:
        raise ValueError(f"nominal size must lie in (0, 1), got {nominal}")


def _check_overidentified(ss: SuffStats) -> None:
    if ss.K < 2:
        raise JustIdentified("overidentification tests need at least two instruments")


def j_md(ss: SuffStats) -> float:
    """Distance between restricted and unrestricted MD minima under the RE weight.

    ``0`` if ``m_min <= K/n``, else ``(m_min - K/n)^2``.
    """
    d = ss.m_min - ss.alpha_k
    return 0.0 if d <= 0 else d * d


def _variance_factor(ss: SuffStats) -> float:
    # (1 - L/n) / (1 - K/n - L/n) in finite-sample form
    return (ss.n - ss.L) / ss.dof


def cd_adjusted_level(ss: SuffStats, delta_hat: float, kappa: float, nominal: float) -> float:
    """Level ``c`` at which the chi-square(K-1) quantile is taken.

    ``c = Phi(sqrt((n - L)/(n - K - L) + delta kappa / 2) * Phi^{-1}(nominal))``.
    """
    _check_nominal(nominal)
    scale = _variance_factor(ss) + 0.5 * delta_hat * kappa
    if scale <= 0:
        raise ValueError("variance factor of the test statistic is not positive")
    return float(stats.norm.cdf(math.sqrt(scale) * stats.norm.ppf(nominal)))


def modified_cd_test(
    ss: SuffStats,
    dd: DesignDiagnostics,
    fit: FitResult,
    kappa_hat: float,
    nominal: float = 0.05,
) -> TestResult:
    """Cragg-Donald test ``n m_min`` with a critical value valid for fixed or growing K.

    Rejects when ``n m_min`` exceeds the ``1 - c`` quantile of chi-square with
    ``K - 1`` degrees of freedom, see :func:`cd_adjusted_level`.  No p-value is
    reported because the adjustment is defined at a given nominal size only.
    `fit` supplies the structural error direction through which `kappa_hat`
    was estimated; it is recorded in the details.
    """
    _check_overidentified(ss)
    kappa = max(float(kappa_hat), -2.0)
    c = cd_adjusted_level(ss, dd.delta_hat, kappa, nominal)
    stat = ss.n * ss.m_min
    crit = float(stats.chi2.isf(c, ss.K - 1))
    return TestResult(
        statistic=float(stat),
        critical_value=crit,
        p_value=None,
        nominal_size=nominal,
        reject=bool(stat > crit),
        method=TestMethod.MODIFIED_CD,
        details={
            "adjusted_level": c,
            "df": float(ss.K - 1),
            "kappa_hat": kappa,
            "delta_hat": float(dd.delta_hat),
            "beta_hat": float(fit.beta_hat),
        },
    )


def sargan_test(ss: SuffStats, nominal: float = 0.05) -> TestResult:
    """Sargan statistic ``n m_min / (1 - K/n - L/n + m_min)`` against chi-square(K - 1)."""
    _check_overidentified(ss)
    _check_nominal(nominal)
    m = ss.m_min
    stat = ss.n * m / (1.0 - ss.alpha_k - ss.alpha_l + m)
    df = ss.K - 1
    crit = float(stats.chi2.isf(nominal, df))
    return TestResult(
        statistic=float(stat),
        critical_value=crit,
        p_value=float(stats.chi2.sf(stat, df)),
        nominal_size=nominal,
        reject=bool(stat > crit),
        method=TestMethod.SARGAN,
        details={"df": float(df)},
    )


def md_j_test(ss: SuffStats, dd: DesignDiagnostics, kappa_hat: float, nominal: float = 0.05) -> TestResult:
    """One-sided test based on the standardized excess of ``m_min`` over ``K/n``.

    ``z = (n / sqrt(K)) (m_min - K/n) / sqrt(2(n - L)/(n - K - L) + delta kappa)``
    is compared with the ``1 - nominal`` Normal quantile; ``n J_md`` is the
    square of the positive part of the unstandardized numerator.  Appropriate
    when K is large.
    """
    _check_overidentified(ss)
    _check_nominal(nominal)
    kappa = max(float(kappa_hat), -2.0)
    var = 2.0 * _variance_factor(ss) + dd.delta_hat * kappa
    if var <= 0:
        raise ValueError("variance factor of the test statistic is not positive")
    z = ss.n / math.sqrt(ss.K) * (ss.m_min - ss.alpha_k) / math.sqrt(var)
    crit = float(stats.norm.isf(nominal))
    return TestResult(
        statistic=float(z),
        critical_value=crit,
        p_value=float(stats.norm.sf(z)),
        nominal_size=nominal,
        reject=bool(z > crit),
        method=TestMethod.MD_J,
        details={"j_md": j_md(ss), "variance": var},
    )
