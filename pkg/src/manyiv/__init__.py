"""Estimation and inference for a linear IV model with many instruments."""

from __future__ import annotations

from .errors import (
    DataError,
    DegenerateDesign,
    DegenerateS,
    EstimationError,
    JustIdentified,
    ManyIVError,
    NoConvergence,
    RankDeficient,
    SpecError,
    TooLarge,
    Unidentified,
    WeakInstruments,
)
from .estimators import FitResult, Kind, emd, liml_re, md_objective, md_re, psd_mix, re_loglik, umd
from .reduce import Dataset, Design, DesignDiagnostics, SuffStats, design_diagnostics, orthogonalize, suff_stats

__version__ = "0.1.0"
