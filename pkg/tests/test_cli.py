import csv
import json
import subprocess
import sys

import pytest

from retainsynth.cli import main
from retainsynth.data import FILES

VALID = ("naive", "pcgrad-global", "pcgrad-module", "sago")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({"seed": 0}))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--steps", "1000", "--eta", "0.5",
                 "--out", str(root / "ckpt" / "model.json")]) == 0
    return root


def run_unlearn(ws, out, **cfg):
    return main(["unlearn", "--ckpt", str(ws / "ckpt" / "model.json"), "--data", str(ws / "data"),
                 "--config", json.dumps(cfg), "--out", str(out)])


def final_accs(capsys):
    line = capsys.readouterr().out.strip().splitlines()[-1]
    return {k: float(v) for k, v in (kv.split("=") for kv in line.split())}


class TestGenData:
    def test_writes_corpus_files(self, workspace):
        for name in FILES.values():
            assert (workspace / "data" / name).is_file()

    def test_rerun_identical(self, workspace, tmp_path):
        assert main(["gen-data", "--spec", str(workspace / "spec.json"), "--out", str(tmp_path)]) == 0
        for name in FILES.values():
            assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()

    def test_missing_spec(self, tmp_path, capsys):
        assert main(["gen-data", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_spec(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"vocab_size": 8}))
        assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == 2


class TestPretrain:
    def test_reaches_target_accuracy(self, workspace):
        man = json.loads((workspace / "ckpt" / "model.manifest.json").read_text())
        assert man["result"]["forget_acc"] >= 0.9 and man["result"]["retain_acc"] >= 0.9
        assert (workspace / "ckpt" / "model.timing.json").is_file()

    def test_zero_steps(self, workspace, tmp_path):
        assert main(["pretrain", "--data", str(workspace / "data"), "--steps", "0",
                     "--out", str(tmp_path / "m.json")]) == 2

    def test_missing_data(self, tmp_path, capsys):
        assert main(["pretrain", "--data", str(tmp_path), "--steps", "1", "--out", str(tmp_path / "m.json")]) == 2
        assert "missing" in capsys.readouterr().err

    def test_fixed_seed_identical_checkpoint(self, workspace, tmp_path):
        args = ["pretrain", "--data", str(workspace / "data"), "--steps", "20", "--seed", "4"]
        assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestUnlearn:
    def test_sago_run(self, workspace, tmp_path):
        assert run_unlearn(workspace, tmp_path, combiner="sago", eta=0.02, steps=30) == 0
        with open(tmp_path / "log.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 31
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["config"]["combiner"] == "sago"
        assert man["corpus_spec"]["shared_grammar_fraction"] == 0.5
        assert "wall_clock_seconds" not in json.dumps(man)

    def test_invalid_combiner_lists_choices(self, workspace, tmp_path, capsys):
        assert run_unlearn(workspace, tmp_path, combiner="frobnicate") == 2
        err = capsys.readouterr().err
        assert all(name in err for name in VALID)

    def test_invalid_objective(self, workspace, tmp_path, capsys):
        assert run_unlearn(workspace, tmp_path, forget_objective="nope") == 2
        assert "simnpo" in capsys.readouterr().err

    @pytest.mark.parametrize("objective", ["ga", "npo", "simnpo"])
    def test_gamma_zero_keeps_retention(self, workspace, tmp_path, capsys, objective):
        pre = json.loads((workspace / "ckpt" / "model.manifest.json").read_text())["result"]["retain_acc"]
        assert run_unlearn(workspace, tmp_path, forget_objective=objective, gamma=0.0, eta=0.05, steps=100) == 0
        assert abs(final_accs(capsys)["retain_acc"] - pre) <= 0.02

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(["unlearn", "--ckpt", str(tmp_path / "x.json"), "--data", str(workspace / "data"),
                     "--config", "{}", "--out", str(tmp_path)]) == 2


class TestSweep:
    def sweep(self, ws, out, grid):
        return main(["sweep", "--ckpt", str(ws / "ckpt" / "model.json"), "--data", str(ws / "data"),
                     "--grid", json.dumps(grid), "--out", str(out)])

    def test_single_cell(self, workspace, tmp_path):
        assert self.sweep(workspace, tmp_path, {"base": {"steps": 5}, "combiner": ["sago"]}) == 0
        with open(tmp_path / "sweep.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 2
        assert (tmp_path / "pareto.csv").is_file()

    def test_empty_grid(self, workspace, tmp_path):
        assert self.sweep(workspace, tmp_path, {}) == 2
        assert self.sweep(workspace, tmp_path, {"gamma": []}) == 2

    def test_rerun_identical(self, workspace, tmp_path):
        grid = {"base": {"steps": 10, "eta": 0.05}, "combiner": ["naive", "sago"], "gamma": [0.5, 1.0]}
        assert self.sweep(workspace, tmp_path / "a", grid) == 0
        assert self.sweep(workspace, tmp_path / "b", grid) == 0
        for name in ("sweep.csv", "pareto.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestReport:
    def test_one_log(self, workspace, tmp_path):
        assert run_unlearn(workspace, tmp_path / "run", steps=20, eta=0.02) == 0
        assert main(["report", "--logs", str(tmp_path / "run" / "log.csv"), "--out", str(tmp_path / "rep")]) == 0
        assert sorted(p.name for p in (tmp_path / "rep").iterdir()) == [
            "log.cosine.svg", "log.loss.svg", "summary.csv"]

    def test_malformed_log(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("step\n1\n")
        assert main(["report", "--logs", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o")]) == 2
        assert "bad.csv:1" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["unlearn"])
    assert info.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "retainsynth", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "retainsynth" in out.stdout
