"""Synthetic forget/retain corpora built from key -> value facts.

Vocabulary layout (ids after the pad token 0)::

    forget keys | retain keys | forget values | retain values | shared filler | forget filler | retain filler

A fact is a key token followed by its value token. Each training sequence
embeds one fact in filler. Every filler token, and every fact's value, is
drawn from the shared region with probability ``shared_grammar_fraction``
and from the corpus' private region otherwise, so that fraction controls how
much the two corpora overlap and therefore how strongly their gradients
conflict. Keys are always private.

A probe is the ``context``-token prefix ending in a fact's key; the answer is
the value. Training sequences reuse the probe prefixes, so a model that fits
the corpus can answer every probe.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .fileio import atomic_write_text
from .model import PAD

Sequence_ = tuple[int, ...]


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    vocab_size: int = 32
    n_forget_facts: int = 4
    n_retain_facts: int = 4
    sequences_per_fact: int = 8
    shared_grammar_fraction: float = 0.5
    probes_per_fact: int = 4
    seq_len: int = 8
    context: int = 2

    def __post_init__(self):
        for name in ("n_forget_facts", "n_retain_facts", "sequences_per_fact", "probes_per_fact"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.seq_len < self.context + 1:
            raise ValueError(f"seq_len must be >= context + 1 = {self.context + 1}")
        f = self.shared_grammar_fraction
        if not (math.isfinite(f) and 0.0 <= f <= 1.0):
            raise ValueError("shared_grammar_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown CorpusSpec fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenLayout:
    forget_keys: tuple[int, ...]
    retain_keys: tuple[int, ...]
    forget_values: tuple[int, ...]
    retain_values: tuple[int, ...]
    shared: tuple[int, ...]
    forget_filler: tuple[int, ...]
    retain_filler: tuple[int, ...]


def layout(spec: CorpusSpec) -> TokenLayout:
    nf, nr = spec.n_forget_facts, spec.n_retain_facts
    rest = spec.vocab_size - 1 - 2 * (nf + nr)
    if rest < 3:
        raise ValueError(
            f"vocab_size={spec.vocab_size} too small for {nf}+{nr} facts "
            f"(need at least {2 * (nf + nr) + 4})"
        )
    private = rest // 3
    shared = rest - 2 * private
    ids = iter(range(1, spec.vocab_size))

    def take(n):
        return tuple(next(ids) for _ in range(n))

    return TokenLayout(take(nf), take(nr), take(nf), take(nr), take(shared), take(private), take(private))


@dataclass(frozen=True)
class ProbeSet:
    probes: list[tuple[Sequence_, int]]
    facts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.probes)

    def prefixes(self) -> np.ndarray:
        return np.array([p for p, _ in self.probes], dtype=np.int64)

    def answers(self) -> np.ndarray:
        return np.array([a for _, a in self.probes], dtype=np.int64)

    def as_sequences(self) -> list[Sequence_]:
        return [tuple(p) + (a,) for p, a in self.probes]

    @classmethod
    def from_sequences(cls, seqs) -> "ProbeSet":
        return cls([(tuple(s[:-1]), s[-1]) for s in seqs])


class SyntheticTask(NamedTuple):
    forget_corpus: list[Sequence_]
    retain_corpus: list[Sequence_]
    forget_probes: ProbeSet
    retain_probes: ProbeSet


def _one_side(rng, spec: CorpusSpec, keys, values, shared, private):
    c, frac = spec.context, spec.shared_grammar_fraction

    def filler(n):
        use_shared = rng.random(n) < frac
        picks_s = rng.choice(shared, size=n)
        picks_p = rng.choice(private, size=n)
        return [int(s) if u else int(p) for u, s, p in zip(use_shared, picks_s, picks_p)]

    own = rng.permutation(values).tolist()
    from_shared = rng.random(len(keys)) < frac
    picks = rng.choice(shared, size=len(keys))
    value_of = {k: int(s) if u else int(v) for k, v, u, s in zip(keys, own, from_shared, picks)}
    probes, corpus = [], []
    for k in keys:
        prefixes = [tuple(filler(c - 1)) + (k,) for _ in range(spec.probes_per_fact)]
        probes.extend((p, value_of[k]) for p in prefixes)
        for i in range(spec.sequences_per_fact):
            body = list(prefixes[i % len(prefixes)]) + [value_of[k]]
            lead = int(rng.integers(0, spec.seq_len - len(body) + 1))
            seq = filler(lead) + body + filler(spec.seq_len - len(body) - lead)
            corpus.append(tuple(seq))
    return corpus, ProbeSet(probes, value_of)


def generate(spec: CorpusSpec) -> SyntheticTask:
    """Deterministic forget/retain corpora and probes for ``spec``."""
    lay = layout(spec)
    rng = np.random.default_rng(spec.seed)
    f_corpus, f_probes = _one_side(rng, spec, lay.forget_keys, lay.forget_values, lay.shared, lay.forget_filler)
    r_corpus, r_probes = _one_side(rng, spec, lay.retain_keys, lay.retain_values, lay.shared, lay.retain_filler)
    return SyntheticTask(f_corpus, r_corpus, f_probes, r_probes)


# -- files ------------------------------------------------------------------


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


def dumps_corpus(corpus) -> str:
    return "".join(json.dumps([int(t) for t in seq], separators=(",", ":")) + "\n" for seq in corpus)


def save_corpus(corpus, path) -> None:
    """One JSON integer array per line, UTF-8."""
    atomic_write_text(path, dumps_corpus(corpus))


def load_corpus(path) -> list[Sequence_]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in rec):
                raise CorpusFormatError(path, lineno, "expected a JSON array of integers")
            out.append(tuple(rec))
    return out


def save_probes(probes: ProbeSet, path) -> None:
    """Probes use the corpus format: the prefix followed by the answer token."""
    save_corpus(probes.as_sequences(), path)


def load_probes(path) -> ProbeSet:
    seqs = load_corpus(path)
    for i, s in enumerate(seqs, start=1):
        if len(s) < 2:
            raise CorpusFormatError(path, i, "probe needs a prefix and an answer")
    return ProbeSet.from_sequences(seqs)


FILES = {
    "forget_corpus": "forget.jsonl",
    "retain_corpus": "retain.jsonl",
    "forget_probes": "forget_probes.jsonl",
    "retain_probes": "retain_probes.jsonl",
}


def save_task(task: SyntheticTask, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / FILES[name] for name in FILES]
    save_corpus(task.forget_corpus, paths[0])
    save_corpus(task.retain_corpus, paths[1])
    save_probes(task.forget_probes, paths[2])
    save_probes(task.retain_probes, paths[3])
    return paths


def load_task(data_dir) -> SyntheticTask:
    d = Path(data_dir)
    return SyntheticTask(
        load_corpus(d / FILES["forget_corpus"]),
        load_corpus(d / FILES["retain_corpus"]),
        load_probes(d / FILES["forget_probes"]),
        load_probes(d / FILES["retain_probes"]),
    )


__all__ = [
    "PAD",
    "CorpusSpec",
    "CorpusFormatError",
    "ProbeSet",
    "SyntheticTask",
    "TokenLayout",
    "generate",
    "layout",
    "load_corpus",
    "load_probes",
    "load_task",
    "save_corpus",
    "save_probes",
    "save_task",
]
