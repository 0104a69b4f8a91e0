"""Retention-prioritized gradient synthesis for unlearning, with a desk-scale harness.

The numerical core is :mod:`retainsynth.gradcore` and :mod:`retainsynth.combiners`;
the rest builds a tiny language model, synthetic corpora and an experiment
harness around them.
"""

__version__ = "0.1.0"

from .combiners import (  # noqa: E402
    Combiner,
    CombinerConfig,
    CombineOutcome,
    Scope,
    ZeroProductPolicy,
    combine,
    combine_naive,
    combine_pcgrad,
    combine_sago,
    project_if_conflict,
    sign_gate,
)
from .gradcore import AlignmentError, ModuleGradients, cosine, dot, flatten, norm, norm_sq, unflatten  # noqa: E402
from .objectives import LossKind, ObjectiveParams, evaluate_loss  # noqa: E402

__all__ = [
    "AlignmentError",
    "CombineOutcome",
    "Combiner",
    "CombinerConfig",
    "LossKind",
    "ModuleGradients",
    "ObjectiveParams",
    "Scope",
    "ZeroProductPolicy",
    "combine",
    "combine_naive",
    "combine_pcgrad",
    "combine_sago",
    "cosine",
    "dot",
    "evaluate_loss",
    "flatten",
    "norm",
    "norm_sq",
    "project_if_conflict",
    "sign_gate",
    "unflatten",
]
