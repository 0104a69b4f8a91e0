"""Standalone SVG charts and a per-run summary table built from step logs."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .fileio import atomic_write_text
from .harness import StepLog, _fmt, pareto_mask, read_log_csv

SUMMARY_COLUMNS = (
    "run", "steps", "cos_fr", "cos_cf", "cos_cr", "conflict_fraction",
    "final_forget_loss", "final_retain_loss", "forget_acc", "retain_acc", "pareto",
)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _num(x: float) -> str:
    return format(float(x), ".6g")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _range(values: np.ndarray, pad: float = 0.05) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        half = max(abs(lo) * 0.1, 0.5)
        return lo - half, hi + half
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Canvas:
    """Maps data coordinates onto a fixed plot area and collects SVG elements."""

    def __init__(self, title: str, xlabel: str, ylabel: str, xr, yr):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2 - RIGHT / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{LEFT + (W - LEFT - RIGHT) / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="15" y="{TOP + (H - TOP - BOTTOM) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 15 {TOP + (H - TOP - BOTTOM) / 2})">{escape(ylabel)}</text>',
        ]
        x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
        self.parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
        for v in _ticks(*xr):
            px = self.px(v)
            self.parts.append(f'<line x1="{_num(px)}" y1="{y0}" x2="{_num(px)}" y2="{y0 + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{_num(px)}" y="{y0 + 16}" text-anchor="middle">{_num(v)}</text>')
        for v in _ticks(*yr):
            py = self.py(v)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{_num(py)}" x2="{x0}" y2="{_num(py)}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{_num(py + 4)}" text-anchor="end">{_num(v)}</text>')
        self._legend = 0

    def px(self, x: float) -> float:
        lo, hi = self.xr
        return LEFT + (x - lo) / (hi - lo) * (W - LEFT - RIGHT)

    def py(self, y: float) -> float:
        lo, hi = self.yr
        return (H - BOTTOM) - (y - lo) / (hi - lo) * (H - TOP - BOTTOM)

    def polyline(self, xs, ys, color: str, label: str) -> None:
        pts = " ".join(f"{_num(self.px(x))},{_num(self.py(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        self.legend(color, label)

    def legend(self, color: str, label: str) -> None:
        y = TOP + 10 + 16 * self._legend
        x = W - RIGHT + 12
        self.parts.append(f'<rect x="{x}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        self.parts.append(f'<text x="{x + 16}" y="{y + 1}">{escape(label)}</text>')
        self._legend += 1

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(title: str, xlabel: str, ylabel: str, series: Sequence[tuple[str, Sequence, Sequence]],
               y_range: tuple[float, float] | None = None) -> str:
    """One polyline per ``(label, xs, ys)`` entry."""
    if not series:
        raise ValueError("no series to plot")
    xs_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    c = _Canvas(title, xlabel, ylabel, _range(xs_all, 0.0), y_range or _range(ys_all))
    for i, (label, xs, ys) in enumerate(series):
        c.polyline(xs, ys, PALETTE[i % len(PALETTE)], label)
    return c.svg()


def loss_chart(name: str, logs: Sequence[StepLog]) -> str:
    steps = [r.step for r in logs]
    return line_chart(f"loss dynamics: {name}", "step", "loss (nats)", [
        ("retain loss", steps, [r.retain_loss for r in logs]),
        ("forget loss", steps, [r.forget_loss for r in logs]),
    ])


def cosine_chart(name: str, logs: Sequence[StepLog]) -> str:
    steps = [r.step for r in logs]
    return line_chart(f"gradient cosines: {name}", "step", "cosine", [
        ("forget-retain", steps, [r.cos_fr for r in logs]),
        ("comb-forget", steps, [r.cos_cf for r in logs]),
        ("comb-retain", steps, [r.cos_cr for r in logs]),
    ], y_range=(-1.05, 1.05))


def tradeoff_chart(names: Sequence[str], forget: Sequence[float], retain: Sequence[float],
                   pareto: Sequence[bool]) -> str:
    """Forget vs retain accuracy per run; frontier points are filled and joined."""
    c = _Canvas("forget/retain trade-off", "forget accuracy (lower is better)",
                "retain accuracy (higher is better)", (-0.05, 1.05), (-0.05, 1.05))
    front = sorted((f, r) for f, r, p in zip(forget, retain, pareto) if p)
    if len(front) > 1:
        pts = " ".join(f"{_num(c.px(f))},{_num(c.py(r))}" for f, r in front)
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-dasharray="4 3"/>')
    for i, (name, f, r, p) in enumerate(zip(names, forget, retain, pareto)):
        color = PALETTE[i % len(PALETTE)]
        fill = color if p else "white"
        c.parts.append(
            f'<circle cx="{_num(c.px(f))}" cy="{_num(c.py(r))}" r="5" fill="{fill}" stroke="{color}" stroke-width="2"/>'
        )
        c.legend(color, f"{name}{' *' if p else ''}")
    return c.svg()


def final_accuracy(logs: Sequence[StepLog], field: str) -> float | None:
    """Last logged value of ``forget_acc`` or ``retain_acc``."""
    for rec in reversed(logs):
        v = getattr(rec, field)
        if v is not None:
            return v
    return None


def summarize(name: str, logs: Sequence[StepLog]) -> dict:
    if not logs:
        raise ValueError(f"{name}: empty log")
    cols = {k: np.array([getattr(r, k) for r in logs], dtype=np.float64)
            for k in ("cos_fr", "cos_cf", "cos_cr", "conflict_fraction")}
    out = {"run": name, "steps": len(logs)}
    out.update({k: float(np.mean(v)) for k, v in cols.items()})
    out["final_forget_loss"] = logs[-1].forget_loss
    out["final_retain_loss"] = logs[-1].retain_loss
    out["forget_acc"] = final_accuracy(logs, "forget_acc")
    out["retain_acc"] = final_accuracy(logs, "retain_acc")
    out["pareto"] = None
    return out


def _run_names(paths: Sequence[Path]) -> list[str]:
    names, seen = [], {}
    for p in paths:
        base = p.stem
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return names


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_report(log_paths: Sequence, out_dir) -> list[Path]:
    """Render charts and ``summary.csv`` for the given log CSVs; returns written paths.

    Each run gets ``<name>.loss.svg`` and ``<name>.cosine.svg``. With two or
    more runs that logged accuracies, ``tradeoff.svg`` is added.
    """
    paths = [Path(p) for p in log_paths]
    if not paths:
        raise ValueError("at least one log CSV is required")
    runs = [read_log_csv(p) for p in paths]
    names = _run_names(paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    rows = []
    for name, logs in zip(names, runs):
        for kind, svg in (("loss", loss_chart(name, logs)), ("cosine", cosine_chart(name, logs))):
            target = out_dir / f"{name}.{kind}.svg"
            atomic_write_text(target, svg)
            written.append(target)
        rows.append(summarize(name, logs))

    scored = [r for r in rows if r["forget_acc"] is not None and r["retain_acc"] is not None]
    if scored:
        mask = pareto_mask([r["forget_acc"] for r in scored], [r["retain_acc"] for r in scored])
        for r, m in zip(scored, mask):
            r["pareto"] = m
    if len(scored) >= 2:
        target = out_dir / "tradeoff.svg"
        atomic_write_text(target, tradeoff_chart(
            [r["run"] for r in scored], [r["forget_acc"] for r in scored],
            [r["retain_acc"] for r in scored], [r["pareto"] for r in scored]))
        written.append(target)

    target = out_dir / "summary.csv"
    atomic_write_text(target, summary_csv(rows))
    written.append(target)
    return written
