"""
The same experiment through the command line
============================================

Every step writes plain files (JSONL corpora, JSON checkpoints, CSV logs,
SVG charts) so runs can be diffed and rerun byte for byte.
"""

import json
import tempfile
from pathlib import Path

from retainsynth.cli import main

work = Path(tempfile.mkdtemp(prefix="retainsynth-"))
(work / "spec.json").write_text(json.dumps({"seed": 0, "shared_grammar_fraction": 0.5}))

main(["gen-data", "--spec", str(work / "spec.json"), "--out", str(work / "data")])
main(["pretrain", "--data", str(work / "data"), "--steps", "1000", "--eta", "0.5", "--out", str(work / "target.json")])

logs = []
for kind in ("naive", "pcgrad-module", "sago"):
    cfg = {"combiner": kind, "eta": 0.065, "gamma": 0.6, "steps": 300}
    main(["unlearn", "--ckpt", str(work / "target.json"), "--data", str(work / "data"),
          "--config", json.dumps(cfg), "--out", str(work / kind)])
    logs.append(work / kind / "log.csv")

# name the logs after the combiner so the report labels read well
named = []
for p in logs:
    q = p.parent.parent / f"{p.parent.name}.csv"
    q.write_bytes(p.read_bytes())
    named.append(str(q))
main(["report", "--logs", *named, "--out", str(work / "report")])
print((work / "report" / "summary.csv").read_text())

grid = {"base": {"steps": 150, "eta": 0.065}, "combiner": ["naive", "sago"], "gamma": [0.3, 0.6, 1.0]}
main(["sweep", "--ckpt", str(work / "target.json"), "--data", str(work / "data"),
      "--grid", json.dumps(grid), "--out", str(work / "sweep")])
print((work / "sweep" / "pareto.csv").read_text())
print("outputs in", work)
