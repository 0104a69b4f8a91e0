"""Comparison of analytic gradients against finite differences."""

from __future__ import annotations

import numpy as np

from .gradcore import ModuleGradients, flatten


def max_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor * max|n|)``.

    The floor keeps coordinates whose true gradient is essentially zero from
    turning finite-difference rounding noise into huge ratios; it is relative
    to the gradient's own scale.
    """
    if isinstance(analytic, ModuleGradients):
        analytic = flatten(analytic)
    if isinstance(numeric, ModuleGradients):
        numeric = flatten(numeric)
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    scale = float(np.max(np.abs(n))) if n.size else 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff == 0, 0.0, diff / np.where(denom == 0, 1.0, denom))
    return float(rel.max()) if rel.size else 0.0
