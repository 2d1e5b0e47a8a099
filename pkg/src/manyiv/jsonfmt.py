"""Deterministic JSON output: insertion-ordered keys, floats at 12 significant digits."""

from __future__ import annotations

import enum
import json
import math

import numpy as np

__all__ = ["normalize", "dumps"]


def normalize(obj):
    """Convert numpy and enum values to plain JSON types, rounding floats."""
    if isinstance(obj, dict):
        return {str(k): normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return normalize(obj.tolist())
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        x = float(f"{x:.12g}")
        return 0.0 if x == 0 else x
    return obj


def dumps(obj) -> str:
    return json.dumps(normalize(obj), indent=2, allow_nan=False) + "\n"
