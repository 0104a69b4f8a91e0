"""Forget and retain objectives with analytic gradients.

Every objective here is a batch mean of a scalar function of the sequence
log-likelihood ``log p(x)``, so gradients reduce to a per-sequence weight
passed to :func:`retainsynth.model.log_prob_and_grad`.

* ``GD``     mean of ``-log p(x)`` (retain objective)
* ``GA``     mean of ``log p(x)``; minimizing it pushes likelihood down
* ``NPO``    ``-(2/beta) * mean log sigmoid(-beta * (log p(x) - log p_ref(x)))``
* ``SimNPO`` ``-(2/beta) * mean log sigmoid(-(beta/|x|) * log p(x) - margin)``

``|x|`` counts prediction positions, i.e. ``len(x) - 1``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gradcore import ModuleGradients
from .model import Positions, TinyLM, log_prob_and_grad, positions, sequence_log_probs


class LossKind(str, enum.Enum):
    GA = "ga"
    GD = "gd"
    NPO = "npo"
    SIMNPO = "simnpo"


@dataclass(frozen=True)
class ObjectiveParams:
    beta: float = 1.0
    gamma_margin: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not (math.isfinite(self.gamma_margin) and self.gamma_margin >= 0):
            raise ValueError(f"gamma_margin must be >= 0, got {self.gamma_margin}")


@dataclass(frozen=True)
class LossReport:
    loss: float
    grads: ModuleGradients | None
    mean_log_prob: float


def log_sigmoid_stable(z):
    """``log(1 / (1 + exp(-z)))`` without overflow."""
    out = -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def _sigmoid(z):
    return np.exp(log_sigmoid_stable(z))


def log_prob(model: TinyLM, x) -> float:
    """``sum_t log p(x_t | x_<t)`` for one sequence."""
    return float(sequence_log_probs(model, [x])[0])


def _require_ref(model: TinyLM, ref_model: TinyLM | None) -> TinyLM:
    if ref_model is None:
        raise ValueError("NPO needs a reference model")
    if ref_model.dims != model.dims or ref_model.schema != model.schema:
        raise ValueError(f"reference model schema {ref_model.schema} differs from {model.schema}")
    return ref_model


def evaluate_loss(kind, batch, model: TinyLM, params: ObjectiveParams | None = None,
                  ref_model: TinyLM | None = None, with_grad: bool = True,
                  pos: Positions | None = None) -> LossReport:
    kind = LossKind(kind)
    params = params or ObjectiveParams()
    pos = pos or positions(batch, model.dims)
    n = pos.n_seqs
    beta = params.beta

    if kind is LossKind.GA:
        rep = evaluate_loss(LossKind.GD, batch, model, params, with_grad=with_grad, pos=pos)
        grads = rep.grads.map(np.negative) if rep.grads is not None else None
        return LossReport(-rep.loss, grads, rep.mean_log_prob)

    if kind is LossKind.GD:
        def terms(lp):
            return -lp

        def weights(lp):
            return np.full(n, -1.0 / n)

    elif kind is LossKind.NPO:
        ref_lp = sequence_log_probs(_require_ref(model, ref_model), batch, pos)

        def terms(lp):
            return -(2.0 / beta) * log_sigmoid_stable(-beta * (lp - ref_lp))

        def weights(lp):
            return 2.0 * _sigmoid(beta * (lp - ref_lp)) / n

    else:
        size = pos.lengths.astype(np.float64)
        margin = params.gamma_margin

        def terms(lp):
            return -(2.0 / beta) * log_sigmoid_stable(-(beta / size) * lp - margin)

        def weights(lp):
            return (2.0 / size) * _sigmoid((beta / size) * lp + margin) / n

    if with_grad:
        lp, _, grads = log_prob_and_grad(model, batch, weights, pos)
    else:
        lp, grads = sequence_log_probs(model, batch, pos), None
    return LossReport(float(np.mean(terms(lp))), grads, float(np.mean(lp)))


def loss_gd(batch, model: TinyLM) -> LossReport:
    return evaluate_loss(LossKind.GD, batch, model)


def loss_ga(batch, model: TinyLM) -> LossReport:
    return evaluate_loss(LossKind.GA, batch, model)


def loss_npo(batch, model: TinyLM, ref_model: TinyLM, params: ObjectiveParams | None = None) -> LossReport:
    return evaluate_loss(LossKind.NPO, batch, model, params, ref_model=ref_model)


def loss_simnpo(batch, model: TinyLM, params: ObjectiveParams | None = None) -> LossReport:
    return evaluate_loss(LossKind.SIMNPO, batch, model, params)
