import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import uniform_model

from retainsynth import harness
from retainsynth.combiners import Combiner, CombinerConfig, Scope, combine, combine_naive
from retainsynth.data import CorpusSpec, ProbeSet, generate
from retainsynth.gradcore import AlignmentError, ModuleGradients, flatten
from retainsynth.harness import (
    LOG_COLUMNS,
    BatchSampler,
    InvariantViolation,
    check_invariants,
    LogFormatError,
    UnlearnConfig,
    evaluate,
    expand_grid,
    gradient_geometry,
    logs_to_csv,
    pareto_mask,
    read_log_csv,
    run_sweep,
    sweep_to_csv,
    train_gd,
    unlearn,
)
from retainsynth.model import Dims, TinyLM


@pytest.fixture(scope="module")
def task():
    return generate(CorpusSpec(seed=0))


@pytest.fixture(scope="module")
def trained(task):
    return train_gd(TinyLM.init(0, Dims()), task.forget_corpus + task.retain_corpus, 0.5, 300)


def params_of(m):
    return flatten(m.parameters())


def mg(**kw):
    return ModuleGradients({k: np.asarray(v, dtype=float) for k, v in kw.items()})


class TestConfig:
    def test_steps_must_be_positive(self):
        with pytest.raises(ValueError, match="steps"):
            UnlearnConfig(steps=0)

    def test_invalid_combiner_lists_choices(self):
        with pytest.raises(ValueError) as info:
            UnlearnConfig(combiner="frobnicate")
        for name in ("naive", "pcgrad-global", "pcgrad-module", "sago"):
            assert name in str(info.value)

    def test_retain_objective_is_not_a_forget_objective(self):
        with pytest.raises(ValueError, match="forget_objective"):
            UnlearnConfig(forget_objective="gd")

    def test_dict_round_trip(self):
        cfg = UnlearnConfig(combiner="pcgrad-module", alpha=0.5, eta=0.1, zero_product_policy="retain-wins")
        assert UnlearnConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            UnlearnConfig.from_dict({"lr": 0.1})

    @pytest.mark.parametrize("bad", [dict(eta=0.0), dict(alpha=-1.0), dict(beta=0.0), dict(forget_batch=-1)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            UnlearnConfig(**bad)


class TestSampler:
    def test_each_epoch_covers_corpus(self):
        corpus = [(i, i) for i in range(10)]
        s = BatchSampler(corpus, 5, np.random.default_rng(0))
        for _ in range(3):
            seen = s.next() + s.next()
            assert sorted(seen) == corpus

    def test_full_batch(self):
        corpus = [(1, 2), (3, 4)]
        assert BatchSampler(corpus, 0, np.random.default_rng(0)).next() == corpus
        assert BatchSampler(corpus, 9, np.random.default_rng(0)).next() == corpus

    def test_empty(self):
        with pytest.raises(ValueError):
            BatchSampler([], 1, np.random.default_rng(0))


class TestEvaluate:
    def test_uniform_model_is_at_chance(self):
        rng = np.random.default_rng(0)
        probes = ProbeSet([((int(a), int(b)), int(c)) for a, b, c in rng.integers(1, 32, size=(100, 3))])
        acc, ll = evaluate(uniform_model(32), probes)
        assert 0.0 <= acc <= 0.15
        assert ll == pytest.approx(-math.log(32), abs=1e-12)

    def test_oracle(self, task):
        table = {p: a for p, a in task.retain_probes.probes}

        def oracle(prefixes):
            out = np.zeros((len(prefixes), 32))
            for i, p in enumerate(prefixes):
                out[i, table[tuple(int(t) for t in p)]] = 1.0
            return np.log(np.clip(out, 1e-300, None))

        assert evaluate(oracle, task.retain_probes)[0] == 1.0

    def test_ties_go_to_lowest_id(self):
        flat = lambda prefixes: np.zeros((len(prefixes), 4))  # noqa: E731
        assert evaluate(flat, ProbeSet([((1, 2), 0), ((1, 2), 3)]))[0] == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            evaluate(uniform_model(4), ProbeSet([]))
        with pytest.raises(ValueError, match="context"):
            evaluate(uniform_model(4), ProbeSet([((1, 2, 3), 1)]))


class TestGeometry:
    def test_orthogonal(self):
        assert gradient_geometry(mg(m=(0, 1)), mg(m=(1, 0)), mg(m=(1, 0))) == (0.0, 0.0, 1.0)

    def test_hand_example(self):
        g_r, g_f = mg(m=(1, 1)), mg(m=(2, -3))
        fr, cf, cr = gradient_geometry(g_f, g_r, mg(m=(2, 1)))
        assert fr == pytest.approx(-1 / math.sqrt(26), abs=1e-12)
        assert cr == pytest.approx(3 / math.sqrt(10), abs=1e-12)
        assert cf == pytest.approx(1 / math.sqrt(65), abs=1e-12)

    def test_equal_inputs(self):
        g = mg(a=(1, -2), b=(3,))
        assert gradient_geometry(g, g, g) == pytest.approx((1.0, 1.0, 1.0), abs=1e-15)

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            gradient_geometry(mg(a=(1,)), mg(b=(1,)), mg(b=(1,)))


class TestUnlearn:
    def test_naive_without_forgetting_is_retain_descent(self, task, trained):
        cfg = UnlearnConfig(combiner="naive", gamma=0.0, eta=0.05, steps=40, seed=3)
        m, _ = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg)
        ref = train_gd(trained, task.retain_corpus, 0.05, 40, batch_size=cfg.retain_batch, seed=3)
        assert np.max(np.abs(params_of(m) - params_of(ref))) <= 1e-12

    @pytest.mark.parametrize("alpha", [1.0, 0.5])
    def test_sago_under_total_conflict_is_scaled_retain_descent(self, task, alpha):
        # the same full batch on both sides makes g_f = -g_r exactly
        corpus = task.retain_corpus
        model = TinyLM.init(1, Dims())
        cfg = UnlearnConfig(combiner="sago", alpha=alpha, eta=0.2, steps=25, forget_batch=0, retain_batch=0)
        m, logs = unlearn(model, corpus, corpus, cfg)
        ref = train_gd(model, corpus, 0.2 * alpha, 25)
        assert np.max(np.abs(params_of(m) - params_of(ref))) <= 1e-12
        assert all(r.cos_fr == pytest.approx(-1.0, abs=1e-12) for r in logs)

    def test_input_model_untouched_and_deterministic(self, task, trained):
        before = params_of(trained).copy()
        cfg = UnlearnConfig(combiner="pcgrad-module", eta=0.05, steps=20, seed=5)
        m1, l1 = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg, task.forget_probes, task.retain_probes)
        m2, l2 = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg, task.forget_probes, task.retain_probes)
        assert np.array_equal(params_of(trained), before)
        assert params_of(m1).tobytes() == params_of(m2).tobytes()
        assert l1 == l2

    def test_log_completeness_and_cadence(self, task, trained):
        cfg = UnlearnConfig(eta=0.05, steps=25, eval_every=10)
        _, logs = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg, task.forget_probes, task.retain_probes)
        assert [r.step for r in logs] == list(range(1, 26))
        evaluated = [r.step for r in logs if r.forget_acc is not None]
        assert evaluated == [10, 20, 25]
        assert all((r.retain_acc is None) == (r.forget_acc is None) for r in logs)

    @pytest.mark.parametrize("kind", ["pcgrad-global", "pcgrad-module", "sago"])
    def test_comb_retain_nonnegative(self, task, trained, kind):
        cfg = UnlearnConfig(combiner=kind, eta=0.05, steps=60)
        _, logs = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg)
        assert min(r.cos_cr for r in logs) >= -1e-12
        assert all(-1 <= r.cos_fr <= 1 and -1 <= r.cos_cf <= 1 for r in logs)

    @pytest.mark.parametrize("objective", ["npo", "simnpo"])
    def test_bounded_objectives_run(self, task, trained, objective):
        cfg = UnlearnConfig(forget_objective=objective, eta=0.05, steps=5)
        _, logs = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg)
        assert len(logs) == 5
        if objective == "npo":
            # the reference is the input model, so the first loss is 2 ln 2
            assert logs[0].forget_loss == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_live_invariant_violation(self, task, trained, monkeypatch):
        # a combiner that claims to be SAGO but returns the plain sum
        monkeypatch.setattr(harness, "combine", lambda kind, g_r, g_f, cfg: combine_naive(g_r, g_f, cfg))
        cfg = UnlearnConfig(combiner="sago", eta=0.05, steps=5)
        with pytest.raises(InvariantViolation):
            unlearn(trained, task.forget_corpus, task.retain_corpus, cfg)
        _, logs = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg, check=False)
        assert len(logs) == 5

    @pytest.mark.parametrize("kind", [Combiner.PCGRAD_GLOBAL, Combiner.PCGRAD_MODULE])
    def test_invariants_accept_small_and_tiny_gradients(self, kind):
        scope = Scope.GLOBAL if kind is Combiner.PCGRAD_GLOBAL else Scope.MODULE_WISE
        for g_r, g_f in [((1e-7, 0.0), (-1.0, 2.0)), ((3.0, 0.0), (-7.8e-240, 0.0))]:
            gr, gf = ModuleGradients({"m": np.array(g_r)}), ModuleGradients({"m": np.array(g_f)})
            check_invariants(kind, gf, gr, combine(kind, gr, gf, CombinerConfig(scope=scope)))

    def test_empty_corpus(self, task, trained):
        with pytest.raises(ValueError):
            unlearn(trained, [], task.retain_corpus, UnlearnConfig(steps=1))


class TestCsv:
    def test_format_and_round_trip(self, task, trained, tmp_path):
        cfg = UnlearnConfig(eta=0.05, steps=12)
        _, logs = unlearn(trained, task.forget_corpus, task.retain_corpus, cfg, task.forget_probes, task.retain_probes)
        text = logs_to_csv(logs)
        rows = list(csv.reader(text.splitlines()))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert len(rows) == 13
        assert rows[1][-1] == "" and rows[10][-1] != ""
        for cell in rows[1][1:7]:
            assert len(cell.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 9
        p = tmp_path / "log.csv"
        p.write_text(text)
        back = read_log_csv(p)
        assert [r.step for r in back] == [r.step for r in logs]
        for a, b in zip(back, logs):
            assert a.cos_cr == pytest.approx(b.cos_cr, rel=1e-8, abs=1e-12)
            assert a.forget_acc == b.forget_acc

    def test_malformed_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(LOG_COLUMNS) + "\n1,0,0,0,0,0,0,,\n2,0,0,zero,0,0,0,,\n")
        with pytest.raises(LogFormatError) as info:
            read_log_csv(p)
        assert info.value.lineno == 3
        p.write_text("step,loss\n")
        with pytest.raises(LogFormatError) as info:
            read_log_csv(p)
        assert info.value.lineno == 1


class TestSweep:
    def test_pareto_dominance(self):
        assert pareto_mask([0.1, 0.5], [0.9, 0.4]) == [True, False]
        assert pareto_mask([0.1, 0.5], [0.4, 0.9]) == [True, True]
        assert pareto_mask([0.2, 0.2], [0.5, 0.5]) == [True, True]

    def test_grid_expansion(self):
        cfgs = expand_grid(UnlearnConfig(), {"combiner": ["naive", "sago"], "gamma": [0.1, 0.5, 1.0]})
        assert len(cfgs) == 6
        assert {c.combiner for c in cfgs} == {Combiner.NAIVE, Combiner.SAGO}
        with pytest.raises(ValueError):
            expand_grid(UnlearnConfig(), {})
        with pytest.raises(ValueError):
            expand_grid(UnlearnConfig(), {"gamma": []})
        with pytest.raises(ValueError):
            expand_grid(UnlearnConfig(), {"steps": [1]})

    def test_single_cell(self, task, trained):
        rows = run_sweep(trained, task, UnlearnConfig(steps=5, eta=0.05), {"combiner": ["sago"]})
        assert len(rows) == 1 and rows[0]["pareto"] is True

    def test_grid_is_deterministic_and_sorted(self, task, trained):
        base = UnlearnConfig(steps=15, eta=0.05)
        grid = {"combiner": ["naive", "pcgrad-module", "sago"], "gamma": [0.1, 0.5, 1.0]}
        a = run_sweep(trained, task, base, grid)
        b = run_sweep(trained, task, base, grid)
        assert sweep_to_csv(a) == sweep_to_csv(b)
        assert len(a) == 9
        keys = [(r["forget_acc"], -r["retain_acc"], r["cell"]) for r in a]
        assert keys == sorted(keys)
        assert any(r["pareto"] for r in a)

    def test_workers_match_serial(self, task, trained):
        base = UnlearnConfig(steps=5, eta=0.05)
        grid = {"gamma": [0.5, 1.0]}
        assert run_sweep(trained, task, base, grid, workers=2) == run_sweep(trained, task, base, grid)
