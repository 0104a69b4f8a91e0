"""Strategies that merge a retain gradient and a forget gradient into one update.

All four strategies return a :class:`CombineOutcome`. The retain gradient is
the anchor: PCGrad removes the component of the forget gradient that opposes
it, SAGO keeps per coordinate whichever signal does not fight it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gradcore import (
    EPS_ZERO,
    ModuleGradients,
    _check_pair,
    as_grad_vector,
    flatten,
    require_aligned,
    unflatten,
)


class Scope(str, enum.Enum):
    GLOBAL = "global"
    MODULE_WISE = "module"


class ZeroProductPolicy(str, enum.Enum):
    # Coordinates with g_f * g_r == 0 go to the forget gate.
    PAPER_LITERAL = "paper-literal"
    # Coordinates with g_f == 0 go to the retain gate instead.
    RETAIN_WINS = "retain-wins"


@dataclass(frozen=True)
class CombinerConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    scope: Scope = Scope.MODULE_WISE
    zero_product_policy: ZeroProductPolicy = ZeroProductPolicy.PAPER_LITERAL

    def __post_init__(self):
        for name in ("alpha", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        object.__setattr__(self, "scope", Scope(self.scope))
        object.__setattr__(self, "zero_product_policy", ZeroProductPolicy(self.zero_product_policy))


@dataclass(frozen=True)
class CombineOutcome:
    g_final: ModuleGradients
    g_f_tilde: ModuleGradients
    g_r_tilde: ModuleGradients
    conflict_fraction: float


def project_if_conflict(g_f, g_r) -> np.ndarray:
    """Drop the part of ``g_f`` that points against ``g_r``.

    Projection happens only when ``g_f . g_r < 0`` and ``|g_r| >= EPS_ZERO``;
    otherwise ``g_f`` is returned unchanged. Works row-wise on ``(..., n)``.
    """
    g_f, g_r = as_grad_vector(g_f), as_grad_vector(g_r)
    _check_pair(g_f, g_r)
    d = np.einsum("...i,...i->...", g_f, g_r)
    nr = np.einsum("...i,...i->...", g_r, g_r)
    fire = (d < 0) & (np.sqrt(nr) >= EPS_ZERO)
    if g_f.ndim == 1:
        return g_f - (d / nr) * g_r if fire else g_f.copy()
    coef = np.where(fire, d / np.where(fire, nr, 1.0), 0.0)
    # rows that do not fire must come back bit-identical
    return np.where(fire[..., None], g_f - coef[..., None] * g_r, g_f)


def sign_gate(g_f, g_r, policy=ZeroProductPolicy.PAPER_LITERAL) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise gating into disjointly supported ``(g_f_tilde, g_r_tilde)``."""
    g_f, g_r = as_grad_vector(g_f), as_grad_vector(g_r)
    _check_pair(g_f, g_r)
    prod = g_f * g_r
    to_retain = prod < 0
    if ZeroProductPolicy(policy) is ZeroProductPolicy.RETAIN_WINS:
        to_retain = to_retain | (g_f == 0)
    # np.where rather than multiplying by a mask so no -0.0 or 0*x rounding leaks in
    g_f_tilde = np.where(to_retain, 0.0, g_f)
    g_r_tilde = np.where(to_retain, g_r, 0.0)
    return g_f_tilde, g_r_tilde


def combine_naive(g_r: ModuleGradients, g_f: ModuleGradients, cfg: CombinerConfig) -> CombineOutcome:
    require_aligned(g_r, g_f)
    g_final = ModuleGradients((k, cfg.alpha * g_r[k] + cfg.gamma * g_f[k]) for k in g_r)
    conflict = float(np.dot(flatten(g_f), flatten(g_r)) < 0)
    return CombineOutcome(g_final, g_f, g_r, conflict)


def combine_pcgrad(g_r: ModuleGradients, g_f: ModuleGradients, cfg: CombinerConfig) -> CombineOutcome:
    require_aligned(g_r, g_f)
    if cfg.scope is Scope.GLOBAL:
        flat_f = flatten(g_f)
        flat_r = flatten(g_r)
        conflict = float(np.dot(flat_f, flat_r) < 0)
        g_f_tilde = unflatten(project_if_conflict(flat_f, flat_r), g_r.schema)
    else:
        parts, hits = [], 0
        for k in g_r:
            hits += int(np.dot(g_f[k], g_r[k]) < 0)
            parts.append((k, project_if_conflict(g_f[k], g_r[k])))
        g_f_tilde = ModuleGradients(parts)
        conflict = hits / len(g_r)
    g_final = ModuleGradients((k, cfg.alpha * g_r[k] + cfg.gamma * g_f_tilde[k]) for k in g_r)
    return CombineOutcome(g_final, g_f_tilde, g_r, conflict)


def combine_sago(g_r: ModuleGradients, g_f: ModuleGradients, cfg: CombinerConfig) -> CombineOutcome:
    """Sign-gated synthesis over the whole parameter set, ignoring module boundaries."""
    require_aligned(g_r, g_f)
    flat_f, flat_r = flatten(g_f), flatten(g_r)
    f_t, r_t = sign_gate(flat_f, flat_r, cfg.zero_product_policy)
    final = cfg.alpha * r_t + cfg.gamma * f_t
    conflict = float(np.mean(flat_f * flat_r < 0))
    schema = g_r.schema
    return CombineOutcome(unflatten(final, schema), unflatten(f_t, schema), unflatten(r_t, schema), conflict)


class Combiner(str, enum.Enum):
    NAIVE = "naive"
    PCGRAD_GLOBAL = "pcgrad-global"
    PCGRAD_MODULE = "pcgrad-module"
    SAGO = "sago"


def combine(kind: Combiner | str, g_r: ModuleGradients, g_f: ModuleGradients, cfg: CombinerConfig) -> CombineOutcome:
    """Dispatch on a :class:`Combiner` name; PCGrad scope comes from ``kind``."""
    kind = Combiner(kind)
    if kind is Combiner.NAIVE:
        return combine_naive(g_r, g_f, cfg)
    if kind is Combiner.SAGO:
        return combine_sago(g_r, g_f, cfg)
    scope = Scope.GLOBAL if kind is Combiner.PCGRAD_GLOBAL else Scope.MODULE_WISE
    if cfg.scope is not scope:
        cfg = CombinerConfig(cfg.alpha, cfg.gamma, scope, cfg.zero_product_policy)
    return combine_pcgrad(g_r, g_f, cfg)
