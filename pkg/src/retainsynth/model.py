"""A fixed-context feed-forward next-token model with hand-written backprop.

Each position ``t >= 1`` of a sequence predicts ``x[t]`` from the previous
``context`` tokens, front-padded with :data:`PAD` (id 0). The embeddings of
the context are concatenated, passed through one tanh layer, then a linear
layer and a softmax over the vocabulary.

Parameters live in three named modules, in this order::

    embed   (V, d)                    row-major
    hidden  W (c*d, h) then bias (h)
    out     U (h, V)   then bias (V)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gradcore import AlignmentError, ModuleGradients

PAD = 0
MODULES = ("embed", "hidden", "out")
CHECKPOINT_FORMAT = "retainsynth.tinylm/1"


@dataclass(frozen=True)
class Dims:
    vocab_size: int = 32
    embed_dim: int = 16
    hidden_dim: int = 32
    context: int = 2

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        for name in ("embed_dim", "hidden_dim", "context"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")

    @property
    def shapes(self) -> dict[str, int]:
        V, d, h, c = self.vocab_size, self.embed_dim, self.hidden_dim, self.context
        return {"embed": V * d, "hidden": c * d * h + h, "out": h * V + V}

    @property
    def n_params(self) -> int:
        return sum(self.shapes.values())


class TinyLM:
    def __init__(self, dims: Dims, params: dict[str, np.ndarray], max_params: int = 100_000):
        if dims.n_params > max_params:
            raise ValueError(f"model has {dims.n_params} parameters, cap is {max_params}")
        shapes = dims.shapes
        if tuple(params) != MODULES:
            raise ValueError(f"expected modules {MODULES}, got {tuple(params)}")
        self.dims = dims
        self.params: dict[str, np.ndarray] = {}
        for name in MODULES:
            arr = np.array(params[name], dtype=np.float64).reshape(-1)
            if arr.size != shapes[name]:
                raise ValueError(f"module {name!r} has {arr.size} values, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"module {name!r} has non-finite values")
            self.params[name] = arr

    @classmethod
    def init(cls, seed: int, dims: Dims | None = None, **kw) -> "TinyLM":
        """Seeded uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer."""
        dims = dims or Dims()
        V, d, h, c = dims.vocab_size, dims.embed_dim, dims.hidden_dim, dims.context
        rng = np.random.default_rng(seed)
        fan_ins = {"embed": V, "hidden": c * d, "out": h}
        params = {
            name: rng.uniform(-1.0, 1.0, size=dims.shapes[name]) / math.sqrt(fan_ins[name])
            for name in MODULES
        }
        return cls(dims, params, **kw)

    # views into the flat module storage
    @property
    def E(self) -> np.ndarray:
        return self.params["embed"].reshape(self.dims.vocab_size, self.dims.embed_dim)

    @property
    def W(self) -> np.ndarray:
        c, d, h = self.dims.context, self.dims.embed_dim, self.dims.hidden_dim
        return self.params["hidden"][: c * d * h].reshape(c * d, h)

    @property
    def b(self) -> np.ndarray:
        return self.params["hidden"][-self.dims.hidden_dim:]

    @property
    def U(self) -> np.ndarray:
        h, V = self.dims.hidden_dim, self.dims.vocab_size
        return self.params["out"][: h * V].reshape(h, V)

    @property
    def ub(self) -> np.ndarray:
        return self.params["out"][-self.dims.vocab_size:]

    @property
    def schema(self) -> tuple[tuple[str, int], ...]:
        return tuple((k, v.size) for k, v in self.params.items())

    @property
    def n_params(self) -> int:
        return self.dims.n_params

    def parameters(self) -> ModuleGradients:
        return ModuleGradients(self.params)

    def copy(self) -> "TinyLM":
        return TinyLM(self.dims, {k: v.copy() for k, v in self.params.items()})

    def __repr__(self) -> str:
        return f"TinyLM({self.dims}, n_params={self.n_params})"


def snapshot(model: TinyLM) -> TinyLM:
    """Deep copy whose parameter arrays are read-only."""
    snap = model.copy()
    for arr in snap.params.values():
        arr.flags.writeable = False
    return snap


# -- batching ---------------------------------------------------------------


@dataclass(frozen=True)
class Positions:
    """All prediction positions of a batch, flattened."""

    contexts: np.ndarray  # (P, c) int
    targets: np.ndarray  # (P,) int
    seq_index: np.ndarray  # (P,) int
    n_seqs: int
    lengths: np.ndarray  # (N,) prediction positions per sequence


def check_sequence(x, vocab_size: int) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"sequence needs at least 2 tokens, got {list(np.ravel(arr))}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("token ids must be integers")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"token id out of range [0, {vocab_size})")
    return arr.astype(np.int64)


def positions(batch: Sequence[Sequence[int]], dims: Dims) -> Positions:
    if len(batch) == 0:
        raise ValueError("empty batch")
    c = dims.context
    ctxs, tgts, idx, lengths = [], [], [], []
    for n, x in enumerate(batch):
        arr = check_sequence(x, dims.vocab_size)
        padded = np.concatenate([np.full(c, PAD, dtype=np.int64), arr])
        L = arr.size
        # window for target arr[t] is padded[t : t + c]
        win = np.lib.stride_tricks.sliding_window_view(padded[:-1], c)[1:L]
        ctxs.append(win)
        tgts.append(arr[1:])
        idx.append(np.full(L - 1, n, dtype=np.int64))
        lengths.append(L - 1)
    return Positions(
        np.concatenate(ctxs), np.concatenate(tgts), np.concatenate(idx), len(batch), np.array(lengths)
    )


# -- forward / backward -----------------------------------------------------


def _hidden(model: TinyLM, contexts: np.ndarray):
    emb = model.E[contexts].reshape(contexts.shape[0], -1)
    hid = np.tanh(emb @ model.W + model.b)
    return emb, hid


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def next_token_log_probs(model: TinyLM, contexts) -> np.ndarray:
    """Log-distribution over the next token for each ``(c,)`` context row."""
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim == 1:
        contexts = contexts[None, :]
    if contexts.shape[1] != model.dims.context:
        raise ValueError(f"context rows must have length {model.dims.context}, got {contexts.shape[1]}")
    if contexts.min() < 0 or contexts.max() >= model.dims.vocab_size:
        raise ValueError("token id out of range")
    _, hid = _hidden(model, contexts)
    return _log_softmax(hid @ model.U + model.ub)


def forward(model: TinyLM, x) -> tuple[np.ndarray, float]:
    """Per-position log-probability table ``(L-1, V)`` and total ``log p(x)``."""
    pos = positions([x], model.dims)
    table = next_token_log_probs(model, pos.contexts)
    total = float(table[np.arange(pos.targets.size), pos.targets].sum())
    return table, total


def sequence_log_probs(model: TinyLM, batch, pos: Positions | None = None) -> np.ndarray:
    """``log p(x)`` for each sequence of the batch."""
    pos = pos or positions(batch, model.dims)
    table = next_token_log_probs(model, pos.contexts)
    tok = table[np.arange(pos.targets.size), pos.targets]
    return np.bincount(pos.seq_index, weights=tok, minlength=pos.n_seqs)


def log_prob_and_grad(model: TinyLM, batch, weights_fn, pos: Positions | None = None):
    """Gradient of ``sum_n w_n * log p(x_n)``.

    ``weights_fn`` receives the per-sequence log-probabilities and returns the
    per-sequence weights ``w_n``, so callers can express any loss of the form
    ``mean_n f(log p(x_n))`` through ``w_n = f'(log p(x_n)) / N``.

    Returns ``(seq_log_probs, weights, ModuleGradients)``.
    """
    pos = pos or positions(batch, model.dims)
    V = model.dims.vocab_size
    emb, hid = _hidden(model, pos.contexts)
    logp = _log_softmax(hid @ model.U + model.ub)
    rows = np.arange(pos.targets.size)
    lp = np.bincount(pos.seq_index, weights=logp[rows, pos.targets], minlength=pos.n_seqs)
    w = np.asarray(weights_fn(lp), dtype=np.float64)

    # d log p(target) / d logits = onehot - softmax
    dz = -np.exp(logp)
    dz[rows, pos.targets] += 1.0
    dz *= w[pos.seq_index][:, None]

    dU = hid.T @ dz
    dub = dz.sum(axis=0)
    da = (dz @ model.U.T) * (1.0 - hid * hid)
    dW = emb.T @ da
    db = da.sum(axis=0)
    de = (da @ model.W.T).reshape(pos.contexts.shape[0], model.dims.context, -1)
    dE = np.zeros((V, model.dims.embed_dim))
    np.add.at(dE, pos.contexts, de)

    grads = ModuleGradients(
        [
            ("embed", dE.reshape(-1)),
            ("hidden", np.concatenate([dW.reshape(-1), db])),
            ("out", np.concatenate([dU.reshape(-1), dub])),
        ]
    )
    return lp, w, grads


def apply_update(model: TinyLM, g_final: ModuleGradients, eta: float) -> None:
    """In-place ``theta <- theta - eta * g_final``."""
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    if model.schema != g_final.schema:
        raise AlignmentError(f"schema mismatch: {model.schema} vs {g_final.schema}")
    for k, arr in model.params.items():
        arr -= eta * g_final[k]


def backward(model: TinyLM, batch, loss_kind, params=None, ref_model: TinyLM | None = None) -> ModuleGradients:
    """Analytic gradient of the named objective; see :mod:`retainsynth.objectives`."""
    from .objectives import evaluate_loss

    return evaluate_loss(loss_kind, batch, model, params=params, ref_model=ref_model).grads


def finite_diff_grad(model: TinyLM, batch, loss_kind, params=None, h: float = 1e-5,
                     ref_model: TinyLM | None = None) -> ModuleGradients:
    """Central-difference gradient, one coordinate at a time (test oracle)."""
    from .objectives import evaluate_loss

    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    probe = model.copy()
    pos = positions(batch, model.dims)

    def loss():
        return evaluate_loss(loss_kind, batch, probe, params=params, ref_model=ref_model,
                             with_grad=False, pos=pos).loss

    out = []
    for name, arr in probe.params.items():
        g = np.empty_like(arr)
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + h
            up = loss()
            arr[i] = orig - h
            down = loss()
            arr[i] = orig
            g[i] = (up - down) / (2 * h)
        out.append((name, g))
    return ModuleGradients(out)


def finite_diff(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = fn(theta)
        theta[i] = orig - h
        down = fn(theta)
        theta[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


# -- checkpoints ------------------------------------------------------------


def to_json(model: TinyLM) -> str:
    """Self-describing checkpoint; floats stored as ``float.hex`` for exact round trips."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dims": {
            "vocab_size": model.dims.vocab_size,
            "embed_dim": model.dims.embed_dim,
            "hidden_dim": model.dims.hidden_dim,
            "context": model.dims.context,
        },
        "modules": [
            {"name": k, "length": int(v.size), "values": [float(x).hex() for x in v]}
            for k, v in model.params.items()
        ],
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def from_json(text: str) -> TinyLM:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a TinyLM checkpoint (format={doc.get('format')!r})")
    dims = Dims(**doc["dims"])
    params = {}
    for m in doc["modules"]:
        vals = np.array([float.fromhex(s) for s in m["values"]], dtype=np.float64)
        if vals.size != m["length"]:
            raise ValueError(f"module {m['name']!r}: length field disagrees with values")
        params[m["name"]] = vals
    return TinyLM(dims, params)


def save_checkpoint(model: TinyLM, path) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(path, to_json(model))


def load_checkpoint(path) -> TinyLM:
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())
