"""Command-line entry point: gen-data, pretrain, unlearn, sweep, report.

Exit codes: 0 success, 2 usage or input error, 1 a live combiner invariant
failed during a run.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import FILES, CorpusFormatError, CorpusSpec, generate, load_task, save_task
from .fileio import atomic_write_text, sha256_file
from .harness import (
    InvariantViolation,
    LogFormatError,
    UnlearnConfig,
    evaluate,
    logs_to_csv,
    run_sweep,
    sweep_to_csv,
    train_gd,
    unlearn,
)
from .model import Dims, TinyLM, load_checkpoint, save_checkpoint
from .report import write_report

SPEC_FILE = "corpus_spec.json"


class InputError(Exception):
    """Bad arguments or unreadable inputs; reported with exit code 2."""


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _read_json(arg: str, what: str):
    """Parse ``arg`` as inline JSON when it starts with ``{``, else as a file path."""
    text = arg
    if not arg.lstrip().startswith("{"):
        path = Path(arg)
        if not path.is_file():
            raise InputError(f"{what}: no such file: {path}")
        text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: invalid JSON in {arg}: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError(f"{what}: expected a JSON object")
    return doc


def _load_data(data_dir: str):
    d = Path(data_dir)
    missing = [n for n in FILES.values() if not (d / n).is_file()]
    if missing:
        raise InputError(f"data directory {d} is missing {', '.join(missing)}")
    return load_task(d)


def _corpus_spec(data_dir: str):
    p = Path(data_dir) / SPEC_FILE
    if p.is_file():
        return json.loads(p.read_text(encoding="utf-8"))
    return None


def _file_record(path) -> dict:
    path = Path(path)
    return {"name": path.name, "sha256": sha256_file(path)}


def _data_record(data_dir: str) -> dict:
    d = Path(data_dir)
    return {n: sha256_file(d / n) for n in sorted(FILES.values())}


def _load_ckpt(path: str) -> TinyLM:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint: no such file: {p}")
    try:
        return load_checkpoint(p)
    except (ValueError, KeyError) as exc:
        raise InputError(f"checkpoint {p}: {exc}") from None


def _write_manifest(manifest_path: Path, doc: dict, started: float) -> None:
    """Deterministic manifest plus a ``timing.json`` sidecar for the wall-clock duration."""
    doc = {"tool": "retainsynth", "version": __version__, **doc}
    atomic_write_text(manifest_path, _dump(doc))
    timing = manifest_path.with_name(manifest_path.name.removesuffix("manifest.json") + "timing.json")
    atomic_write_text(timing, _dump({"wall_clock_seconds": round(time.perf_counter() - started, 6)}))


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise InputError(f"spec file not found: {spec_path}")
    spec = CorpusSpec.from_dict(_read_json(str(spec_path), "spec"))
    task = generate(spec)
    out = Path(args.out)
    save_task(task, out)
    atomic_write_text(out / SPEC_FILE, _dump(spec.to_dict()))
    print(f"wrote {len(task.forget_corpus)} forget / {len(task.retain_corpus)} retain sequences, "
          f"{len(task.forget_probes)} / {len(task.retain_probes)} probes to {out}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.perf_counter()
    dims = Dims(**_read_json(args.dims, "dims"))
    if args.steps < 1:
        raise InputError(f"--steps must be >= 1, got {args.steps}")
    task = _load_data(args.data)
    model = train_gd(TinyLM.init(args.seed, dims), task.forget_corpus + task.retain_corpus,
                     args.eta, args.steps, batch_size=args.batch, seed=args.seed)
    out = Path(args.out)
    save_checkpoint(model, out)
    f_acc, _ = evaluate(model, task.forget_probes)
    r_acc, _ = evaluate(model, task.retain_probes)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), {
        "command": "pretrain",
        "dims": asdict(dims),
        "train": {"steps": args.steps, "eta": args.eta, "seed": args.seed, "batch": args.batch},
        "corpus_spec": _corpus_spec(args.data),
        "inputs": {"data": _data_record(args.data)},
        "outputs": {"checkpoint": _file_record(out)},
        "result": {"forget_acc": f_acc, "retain_acc": r_acc},
    }, started)
    print(f"forget_acc={f_acc:.4f} retain_acc={r_acc:.4f}")
    return 0


def cmd_unlearn(args) -> int:
    started = time.perf_counter()
    cfg = UnlearnConfig.from_dict(_read_json(args.config, "config"))
    model = _load_ckpt(args.ckpt)
    task = _load_data(args.data)
    unlearned, logs = unlearn(model, task.forget_corpus, task.retain_corpus, cfg,
                              task.forget_probes, task.retain_probes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(unlearned, out / "model.json")
    atomic_write_text(out / "log.csv", logs_to_csv(logs))
    f_acc, r_acc = logs[-1].forget_acc, logs[-1].retain_acc
    _write_manifest(out / "manifest.json", {
        "command": "unlearn",
        "config": cfg.to_dict(),
        "dims": asdict(model.dims),
        "corpus_spec": _corpus_spec(args.data),
        "inputs": {"checkpoint": _file_record(args.ckpt), "data": _data_record(args.data)},
        "outputs": {"checkpoint": _file_record(out / "model.json"), "log": _file_record(out / "log.csv")},
        "result": {"forget_acc": f_acc, "retain_acc": r_acc},
    }, started)
    print(f"forget_acc={f_acc:.4f} retain_acc={r_acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    doc = _read_json(args.grid, "grid")
    base = UnlearnConfig.from_dict(doc.pop("base", {}))
    if not doc or any(not isinstance(v, list) or not v for v in doc.values()):
        raise InputError("grid must map at least one of combiner/alpha/gamma/eta to a non-empty list")
    model = _load_ckpt(args.ckpt)
    task = _load_data(args.data)
    rows = run_sweep(model, task, base, doc, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "sweep.csv", sweep_to_csv(rows))
    atomic_write_text(out / "pareto.csv", sweep_to_csv([r for r in rows if r["pareto"]]))
    _write_manifest(out / "manifest.json", {
        "command": "sweep",
        "base_config": base.to_dict(),
        "grid": doc,
        "corpus_spec": _corpus_spec(args.data),
        "inputs": {"checkpoint": _file_record(args.ckpt), "data": _data_record(args.data)},
        "outputs": {"sweep": _file_record(out / "sweep.csv"), "pareto": _file_record(out / "pareto.csv")},
    }, started)
    front = sum(r["pareto"] for r in rows)
    print(f"{len(rows)} cells, {front} on the Pareto frontier")
    return 0


def cmd_report(args) -> int:
    for p in args.logs:
        if not Path(p).is_file():
            raise InputError(f"log file not found: {p}")
    written = write_report(args.logs, args.out)
    for p in written:
        print(p)
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="retainsynth", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate forget/retain corpora and probes")
    p.add_argument("--spec", required=True, help="CorpusSpec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="plain descent on forget + retain corpora")
    p.add_argument("--data", required=True)
    p.add_argument("--dims", default="{}", help="Dims JSON file or inline object")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=0, help="batch size, 0 = full corpus")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("unlearn", help="run one unlearning configuration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="UnlearnConfig JSON file or inline object")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("sweep", help="grid over combiner/alpha/gamma/eta")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help='JSON: axes as lists, optional "base" config')
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="SVG charts and summary table from log CSVs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1
    except (InputError, CorpusFormatError, LogFormatError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
