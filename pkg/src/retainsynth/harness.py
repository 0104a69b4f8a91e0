"""The unlearning loop, probe evaluation, gradient diagnostics and sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .combiners import Combiner, CombinerConfig, CombineOutcome, ZeroProductPolicy, combine
from .gradcore import EPS_ZERO, ModuleGradients, cosine, flatten, norm, require_aligned
from .model import TinyLM, apply_update, next_token_log_probs, snapshot
from .objectives import LossKind, ObjectiveParams, evaluate_loss

FORGET_OBJECTIVES = (LossKind.GA, LossKind.NPO, LossKind.SIMNPO)
LOG_COLUMNS = (
    "step", "forget_loss", "retain_loss", "cos_fr", "cos_cf", "cos_cr",
    "conflict_fraction", "forget_acc", "retain_acc",
)
SWEEP_COLUMNS = ("cell", "combiner", "alpha", "gamma", "eta", "forget_acc", "retain_acc", "pareto")
PCGRAD_TOL = 1e-9
SAGO_TOL = 1e-15
COS_TOL = 1e-12


class InvariantViolation(RuntimeError):
    """A combiner produced an update that breaks its own geometric guarantee."""


def _enum_field(name, enum, value, allowed=None):
    allowed = tuple(enum) if allowed is None else allowed
    try:
        out = enum(value)
    except ValueError:
        out = None
    if out not in allowed:
        valid = ", ".join(m.value for m in allowed)
        raise ValueError(f"invalid {name} {value!r}; valid values: {{{valid}}}")
    return out


@dataclass(frozen=True)
class UnlearnConfig:
    forget_objective: LossKind = LossKind.GA
    combiner: Combiner = Combiner.SAGO
    alpha: float = 1.0
    gamma: float = 1.0
    beta: float = 1.0
    gamma_margin: float = 0.0
    eta: float = 0.05
    steps: int = 100
    forget_batch: int = 8
    retain_batch: int = 8
    seed: int = 0
    zero_product_policy: ZeroProductPolicy = ZeroProductPolicy.PAPER_LITERAL
    eval_every: int = 10

    def __post_init__(self):
        for name, enum, allowed in (
            ("forget_objective", LossKind, FORGET_OBJECTIVES),
            ("combiner", Combiner, None),
            ("zero_product_policy", ZeroProductPolicy, None),
        ):
            object.__setattr__(self, name, _enum_field(name, enum, getattr(self, name), allowed))
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ValueError(f"steps must be an integer >= 1, got {self.steps!r}")
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.forget_batch < 0 or self.retain_batch < 0:
            raise ValueError("batch sizes must be >= 0 (0 means the full corpus)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        # validation of the remaining fields lives in these constructors
        self.combiner_config()
        self.objective_params()

    def combiner_config(self) -> CombinerConfig:
        return CombinerConfig(self.alpha, self.gamma, zero_product_policy=self.zero_product_policy)

    def objective_params(self) -> ObjectiveParams:
        return ObjectiveParams(self.beta, self.gamma_margin)

    @classmethod
    def from_dict(cls, doc: dict) -> "UnlearnConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if hasattr(v, "value"):
                out[k] = v.value
        return out


@dataclass(frozen=True)
class StepLog:
    step: int
    forget_loss: float
    retain_loss: float
    cos_fr: float
    cos_cf: float
    cos_cr: float
    conflict_fraction: float
    forget_acc: float | None = None
    retain_acc: float | None = None


# -- sampling ---------------------------------------------------------------


class BatchSampler:
    """Cycles through seeded per-epoch permutations of a corpus.

    ``batch_size == 0`` (or at least the corpus size) yields the whole corpus
    in its stored order every step.
    """

    def __init__(self, corpus: Sequence, batch_size: int, rng: np.random.Generator):
        if len(corpus) == 0:
            raise ValueError("empty corpus")
        self.corpus = list(corpus)
        self.batch_size = batch_size
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list:
        n = len(self.corpus)
        if self.batch_size == 0 or self.batch_size >= n:
            return self.corpus
        picked = []
        while len(picked) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(n).tolist()
            take = min(self.batch_size - len(picked), len(self._order))
            picked.extend(self._order[:take])
            self._order = self._order[take:]
        return [self.corpus[i] for i in picked]


def sampler_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (forget, retain) streams derived from one seed."""
    f, r = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(f), np.random.default_rng(r)


# -- evaluation -------------------------------------------------------------


def evaluate(model, probes) -> tuple[float, float]:
    """Top-1 probe accuracy and mean log-likelihood of the answers.

    ``model`` is a :class:`TinyLM` or any callable mapping an ``(N, c)`` array
    of prefixes to ``(N, V)`` next-token log-probabilities. Ties in the
    argmax go to the lowest token id.
    """
    if len(probes) == 0:
        raise ValueError("empty probe set")
    prefixes, answers = probes.prefixes(), probes.answers()
    if isinstance(model, TinyLM):
        if prefixes.shape[1] != model.dims.context:
            raise ValueError(
                f"probe prefixes have length {prefixes.shape[1]}, model context is {model.dims.context}"
            )
        table = next_token_log_probs(model, prefixes)
    else:
        table = np.asarray(model(prefixes), dtype=np.float64)
    pred = np.argmax(table, axis=1)
    acc = float(np.mean(pred == answers))
    ll = float(np.mean(table[np.arange(answers.size), answers]))
    return acc, ll


def gradient_geometry(g_f: ModuleGradients, g_r: ModuleGradients, g_final: ModuleGradients):
    """``(cos_fr, cos_cf, cos_cr)`` on the flattened vectors."""
    require_aligned(g_f, g_r)
    require_aligned(g_final, g_r)
    f, r, c = flatten(g_f), flatten(g_r), flatten(g_final)
    return cosine(f, r), cosine(c, f), cosine(c, r)


def check_invariants(kind: Combiner, g_f: ModuleGradients, g_r: ModuleGradients, out: CombineOutcome) -> None:
    """Raise :class:`InvariantViolation` if ``out`` breaks its combiner's guarantees."""
    if kind in (Combiner.PCGRAD_GLOBAL, Combiner.PCGRAD_MODULE):
        if kind is Combiner.PCGRAD_GLOBAL:
            scopes = [(flatten(g_f), flatten(g_r), flatten(out.g_f_tilde))]
        else:
            scopes = [(g_f[k], g_r[k], out.g_f_tilde[k]) for k in g_r]
        for f, r, ft in scopes:
            nr = norm(r)
            if f @ r < 0 and nr >= EPS_ZERO:
                resid = abs(float(ft @ r))
                bound = PCGRAD_TOL * norm(f) * nr
                if resid > bound:
                    raise InvariantViolation(f"projected forget gradient not orthogonal: {resid:.3e} > {bound:.3e}")
    if kind is Combiner.SAGO:
        worst = float(np.min(flatten(out.g_final) * flatten(g_r)))
        if worst < -SAGO_TOL:
            raise InvariantViolation(f"SAGO update opposes retain gradient: min product {worst:.3e}")
    if kind is not Combiner.NAIVE:
        c = cosine(flatten(out.g_final), flatten(g_r))
        if c < -COS_TOL:
            raise InvariantViolation(f"{kind.value}: cos(g_final, g_r) = {c:.3e} < 0")


# -- training loops ---------------------------------------------------------


def train_gd(model: TinyLM, corpus, eta: float, steps: int, batch_size: int = 0, seed: int = 0,
             on_step: Callable[[int, float], None] | None = None) -> TinyLM:
    """Plain SGD on the retain objective, drawing batches from the retain stream of ``seed``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model = model.copy()
    sampler = BatchSampler(corpus, batch_size, sampler_rngs(seed)[1])
    for t in range(1, steps + 1):
        rep = evaluate_loss(LossKind.GD, sampler.next(), model)
        apply_update(model, rep.grads, eta)
        if on_step is not None:
            on_step(t, rep.loss)
    return model


def unlearn(model: TinyLM, forget_corpus, retain_corpus, cfg: UnlearnConfig,
            forget_probes=None, retain_probes=None, check: bool = True) -> tuple[TinyLM, list[StepLog]]:
    """Run ``cfg.steps`` iterations of extract-gradients / combine / descend.

    The input model is not modified. Probe accuracies are logged every
    ``cfg.eval_every`` steps and at the last step when probes are given.
    Diagnostics are computed from the training batches of each step.
    """
    if not isinstance(cfg.steps, (int, np.integer)) or cfg.steps < 1:
        raise ValueError("steps >= 1 required")
    if len(forget_corpus) == 0 or len(retain_corpus) == 0:
        raise ValueError("forget and retain corpora must be non-empty")
    model = model.copy()
    ref = snapshot(model) if cfg.forget_objective is LossKind.NPO else None
    f_rng, r_rng = sampler_rngs(cfg.seed)
    f_sampler = BatchSampler(forget_corpus, cfg.forget_batch, f_rng)
    r_sampler = BatchSampler(retain_corpus, cfg.retain_batch, r_rng)
    ccfg, oparams = cfg.combiner_config(), cfg.objective_params()

    logs: list[StepLog] = []
    for t in range(1, cfg.steps + 1):
        f_rep = evaluate_loss(cfg.forget_objective, f_sampler.next(), model, oparams, ref_model=ref)
        r_rep = evaluate_loss(LossKind.GD, r_sampler.next(), model)
        out = combine(cfg.combiner, r_rep.grads, f_rep.grads, ccfg)
        if check:
            check_invariants(cfg.combiner, f_rep.grads, r_rep.grads, out)
        cos_fr, cos_cf, cos_cr = gradient_geometry(f_rep.grads, r_rep.grads, out.g_final)
        apply_update(model, out.g_final, cfg.eta)

        f_acc = r_acc = None
        if t % cfg.eval_every == 0 or t == cfg.steps:
            if forget_probes is not None:
                f_acc = evaluate(model, forget_probes)[0]
            if retain_probes is not None:
                r_acc = evaluate(model, retain_probes)[0]
        logs.append(StepLog(t, f_rep.loss, r_rep.loss, cos_fr, cos_cf, cos_cr,
                            out.conflict_fraction, f_acc, r_acc))
    return model, logs


# -- CSV --------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return format(x, ".9g")
    return str(x)


def logs_to_csv(logs: Iterable[StepLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for rec in logs:
        w.writerow([_fmt(getattr(rec, c)) for c in LOG_COLUMNS])
    return buf.getvalue()


class LogFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


def read_log_csv(path) -> list[StepLog]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_COLUMNS:
        raise LogFormatError(path, 1, f"header must be {','.join(LOG_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(LOG_COLUMNS):
            raise LogFormatError(path, lineno, f"expected {len(LOG_COLUMNS)} fields, got {len(row)}")
        try:
            vals = {"step": int(row[0])}
            for name, cell in zip(LOG_COLUMNS[1:], row[1:]):
                if cell == "":
                    if name in ("forget_acc", "retain_acc"):
                        vals[name] = None
                        continue
                    raise ValueError(f"{name} is empty")
                vals[name] = float(cell)
        except ValueError as exc:
            raise LogFormatError(path, lineno, str(exc)) from None
        out.append(StepLog(**vals))
    if not out:
        raise LogFormatError(path, 1, "no data rows")
    return out


# -- sweeps -----------------------------------------------------------------


def pareto_mask(forget: Sequence[float], retain: Sequence[float]) -> list[bool]:
    """Non-dominated points when lower forget and higher retain are better."""
    pts = list(zip(forget, retain))
    mask = []
    for i, (fi, ri) in enumerate(pts):
        dominated = any(
            fj <= fi and rj >= ri and (fj < fi or rj > ri) for j, (fj, rj) in enumerate(pts) if j != i
        )
        mask.append(not dominated)
    return mask


GRID_KEYS = ("combiner", "alpha", "gamma", "eta")


def expand_grid(base: UnlearnConfig, grid: dict) -> list[UnlearnConfig]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"grid keys must be among {GRID_KEYS}, got {sorted(unknown)}")
    keys = [k for k in GRID_KEYS if k in grid]
    axes = [list(grid[k]) for k in keys]
    if not keys or any(len(a) == 0 for a in axes):
        raise ValueError("empty grid")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*axes)]


def _run_cell(args):
    model, task, cfg = args
    unlearned, _ = unlearn(model, task.forget_corpus, task.retain_corpus, cfg,
                           task.forget_probes, task.retain_probes)
    f_acc, _ = evaluate(unlearned, task.forget_probes)
    r_acc, _ = evaluate(unlearned, task.retain_probes)
    return f_acc, r_acc


def run_sweep(model: TinyLM, task, base_cfg: UnlearnConfig, grid: dict, workers: int = 1) -> list[dict]:
    """One row per grid cell, sorted by (forget_acc, -retain_acc, cell), with Pareto flags."""
    cfgs = expand_grid(base_cfg, grid)
    jobs = [(model, task, c) for c in cfgs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = [
        {"cell": i, "combiner": c.combiner.value, "alpha": float(c.alpha), "gamma": float(c.gamma),
         "eta": float(c.eta), "forget_acc": fa, "retain_acc": ra}
        for i, (c, (fa, ra)) in enumerate(zip(cfgs, results))
    ]
    mask = pareto_mask([r["forget_acc"] for r in rows], [r["retain_acc"] for r in rows])
    for r, m in zip(rows, mask):
        r["pareto"] = m
    rows.sort(key=lambda r: (r["forget_acc"], -r["retain_acc"], r["cell"]))
    return rows


def sweep_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


# -- forgetting-matched comparison ------------------------------------------


WEIGHT_LADDER = (1.0, 0.7, 0.5, 0.3, 0.2, 0.1)


@dataclass(frozen=True)
class MatchedRun:
    cfg: UnlearnConfig
    forget_acc: list[float]
    retain_acc: list[float]
    logs: list[list[StepLog]]

    @property
    def median_forget(self) -> float:
        return float(np.median(self.forget_acc))

    @property
    def median_retain(self) -> float:
        return float(np.median(self.retain_acc))

    def mean_cosines(self) -> tuple[float, float, float]:
        """Mean over seeds of the per-run mean ``(cos_fr, cos_cf, cos_cr)``."""
        per_run = [[np.mean([getattr(r, k) for r in logs]) for k in ("cos_fr", "cos_cf", "cos_cr")]
                   for logs in self.logs]
        return tuple(float(v) for v in np.mean(per_run, axis=0))


def run_seeds(model: TinyLM, task, cfg: UnlearnConfig, seeds: Sequence[int]) -> MatchedRun:
    f_acc, r_acc, all_logs = [], [], []
    for s in seeds:
        c = replace(cfg, seed=int(s))
        _, logs = unlearn(model, task.forget_corpus, task.retain_corpus, c, task.forget_probes, task.retain_probes)
        f_acc.append(logs[-1].forget_acc)
        r_acc.append(logs[-1].retain_acc)
        all_logs.append(logs)
    return MatchedRun(cfg, f_acc, r_acc, all_logs)


def match_forgetting(model: TinyLM, task, base: UnlearnConfig, combiners: Sequence, seeds: Sequence[int],
                     tol: float = 0.05, ladder: Sequence[float] = WEIGHT_LADDER) -> dict:
    """Compare combiners at matched forgetting.

    The first combiner is the baseline and runs at ``base``. Each other
    combiner starts from the same weights; if its median final forget
    accuracy is more than ``tol`` away from the baseline's, it walks down
    ``ladder`` on alpha (when it forgets too little) or gamma (too much),
    keeping the first rung that matches. Returns ``{combiner: MatchedRun}``;
    a combiner that never matches keeps its closest rung.
    """
    kinds = [Combiner(k) for k in combiners]
    out = {kinds[0]: run_seeds(model, task, replace(base, combiner=kinds[0]), seeds)}
    target = out[kinds[0]].median_forget
    for kind in kinds[1:]:
        best = run_seeds(model, task, replace(base, combiner=kind), seeds)
        if abs(best.median_forget - target) > tol:
            knob = "alpha" if best.median_forget > target else "gamma"
            start = getattr(base, knob)
            for w in ladder:
                if w >= start:
                    continue
                cand = run_seeds(model, task, replace(base, combiner=kind, **{knob: w}), seeds)
                if abs(cand.median_forget - target) < abs(best.median_forget - target):
                    best = cand
                if abs(best.median_forget - target) <= tol:
                    break
        out[kind] = best
    return out
