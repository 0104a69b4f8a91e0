"""Flat and module-partitioned gradient arithmetic.

A gradient vector is a 1-D float64 numpy array with at least one entry and
only finite values. ``ModuleGradients`` maps parameter-module names to such
vectors, in a fixed insertion order.

The vector helpers (``dot``, ``norm_sq``, ``norm``, ``cosine``) also accept stacked
inputs of shape ``(..., n)`` and reduce over the last axis, which keeps the
statistical checks vectorized.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping

import numpy as np

EPS_ZERO = 1e-12


class AlignmentError(ValueError):
    """Raised when two gradients do not share the same shape or schema."""


def as_grad_vector(values) -> np.ndarray:
    """Validate and convert ``values`` to a finite float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] == 0:
        raise ValueError("empty gradient vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("gradient vector contains NaN or Inf")
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise AlignmentError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def dot(a, b):
    a, b = as_grad_vector(a), as_grad_vector(b)
    _check_pair(a, b)
    out = np.einsum("...i,...i->...", a, b)
    return float(out) if out.ndim == 0 else out


def norm_sq(a):
    a = as_grad_vector(a)
    out = np.einsum("...i,...i->...", a, a)
    return float(out) if out.ndim == 0 else out


def norm(a):
    """Euclidean norm, rescaled so tiny entries do not underflow when squared."""
    a = as_grad_vector(a)
    scale = np.max(np.abs(a), axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    out = scale[..., 0] * np.sqrt(np.einsum("...i,...i->...", a / safe, a / safe))
    return float(out) if out.ndim == 0 else out


def cosine(a, b):
    """Cosine similarity, clamped to [-1, 1]; 0 if either norm is below EPS_ZERO."""
    a, b = as_grad_vector(a), as_grad_vector(b)
    _check_pair(a, b)
    na = np.sqrt(np.einsum("...i,...i->...", a, a))
    nb = np.sqrt(np.einsum("...i,...i->...", b, b))
    num = np.einsum("...i,...i->...", a, b)
    degenerate = (na < EPS_ZERO) | (nb < EPS_ZERO)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, na * nb))
    out = np.clip(out, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


class ModuleGradients(Mapping[str, np.ndarray]):
    """Ordered, immutable map from module name to a flat gradient vector."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, object] | Iterable[tuple[str, object]]):
        items = entries.items() if isinstance(entries, Mapping) else entries
        built: dict[str, np.ndarray] = {}
        for name, values in items:
            if name in built:
                raise ValueError(f"duplicate module name {name!r}")
            vec = as_grad_vector(values)
            if vec.ndim != 1:
                raise ValueError(f"module {name!r} must be 1-D, got shape {vec.shape}")
            vec = vec.copy()
            vec.flags.writeable = False
            built[name] = vec
        if not built:
            raise ValueError("ModuleGradients needs at least one module")
        self._entries = built

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {v.size}" for k, v in self._entries.items())
        return f"ModuleGradients({{{body}}})"

    @property
    def schema(self) -> tuple[tuple[str, int], ...]:
        return tuple((k, v.size) for k, v in self._entries.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self._entries.values())

    def aligned_with(self, other: "ModuleGradients") -> bool:
        return self.schema == other.schema

    def map(self, fn) -> "ModuleGradients":
        return ModuleGradients((k, fn(v)) for k, v in self._entries.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModuleGradients):
            return NotImplemented
        return self.schema == other.schema and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None  # type: ignore[assignment]


def require_aligned(a: ModuleGradients, b: ModuleGradients) -> None:
    if not a.aligned_with(b):
        raise AlignmentError(f"schema mismatch: {a.schema} vs {b.schema}")


def weighted_sum(alpha: float, a: ModuleGradients, gamma: float, b: ModuleGradients) -> ModuleGradients:
    """Per-coordinate ``alpha * a + gamma * b``."""
    require_aligned(a, b)
    return ModuleGradients((k, alpha * a[k] + gamma * b[k]) for k in a)


def flatten(m: ModuleGradients) -> np.ndarray:
    return np.concatenate([m[k] for k in m])


def unflatten(vec, schema) -> ModuleGradients:
    """Inverse of :func:`flatten` for a ``((name, length), ...)`` schema."""
    vec = as_grad_vector(vec)
    total = sum(n for _, n in schema)
    if vec.ndim != 1 or vec.size != total:
        raise AlignmentError(f"vector of length {vec.size} does not fit schema of length {total}")
    out, start = [], 0
    for name, n in schema:
        out.append((name, vec[start:start + n]))
        start += n
    return ModuleGradients(out)
