"""Fit every estimator to the bundled fixture and run the overidentification tests.

Run from the repository root: ``python3 demos/fit_fixture.py``.
"""

from __future__ import annotations

from pathlib import Path

from manyiv import estimators as est
from manyiv import overid, variance
import numpy as np

from manyiv.cli import read_csv
from manyiv.reduce import Dataset, Design

CSV = Path(__file__).resolve().parents[1] / "tests" / "data" / "fixture.csv"


def main() -> None:
    header, data = read_csv(str(CSV))
    col = {h: data[:, j] for j, h in enumerate(header)}
    W = np.column_stack([col["w1"], col["w2"], np.ones(len(data))])
    Z = np.column_stack([col[h] for h in header if h.startswith("z")])
    d = Dataset(col["y"], col["x"], W, Z)
    design = Design(d.W, d.Zstar)
    ss = design.suff_stats(d.y, d.x)
    dd = design.diagnostics(d.y, d.x)
    print(f"n={ss.n} K={ss.K} L={ss.L}  m_min={ss.m_min:.4f} m_max={ss.m_max:.4f} delta_hat={dd.delta_hat:.3f}")

    liml = est.liml_re(ss)
    mv = variance.delta_hat(ss, dd, liml)
    fe = est.emd(ss, mv.Delta_hat, Omega_hat=liml.Omega_hat)
    fu = est.umd(ss)
    rows = [
        ("LIML, Hessian SE", liml.beta_hat, variance.se_hessian_re(ss, liml).se),
        ("LIML, sandwich SE", liml.beta_hat, variance.se_sandwich_liml(ss, dd, liml, mv).se),
        ("EMD", fe.beta_hat, variance.se_emd(fe, mv, fallback=liml).se),
        ("UMD", fu.beta_hat, variance.se_umd(ss, dd, fu, variance.delta_hat(ss, dd, fu)).se),
        ("PSD mixture", est.psd_mix(ss).beta_hat, float("nan")),
    ]
    for name, b, se in rows:
        print(f"{name:<18} beta={b: .4f}  se={se:.4f}")

    kap = variance.kappa_hat(liml.beta_hat, liml.Omega_hat, mv.Psi4_hat)
    for t in (
        overid.modified_cd_test(ss, dd, liml, kap),
        overid.sargan_test(ss),
        overid.md_j_test(ss, dd, kap),
    ):
        print(f"{t.method.value:<12} stat={t.statistic:8.3f}  crit={t.critical_value:8.3f}  reject={t.reject}")


if __name__ == "__main__":
    main()
