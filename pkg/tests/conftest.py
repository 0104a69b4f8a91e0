import numpy as np
import pytest

from retainsynth.model import Dims, TinyLM


def uniform_model(vocab_size=4, embed_dim=2, hidden_dim=3, context=2, seed=0):
    """Random hidden layers, zero output layer: every next-token distribution is uniform."""
    m = TinyLM.init(seed, Dims(vocab_size, embed_dim, hidden_dim, context))
    m.params["out"][:] = 0.0
    return m


def certain_model(tokens=(1, 1, 1)):
    """V=2 model that puts (numerically) all mass on token 1 everywhere."""
    m = TinyLM.init(0, Dims(2, 2, 2, 2))
    m.params["out"][:] = 0.0
    m.ub[:] = [-1000.0, 1000.0]
    return m


def random_batch(rng, vocab_size, n=4, min_len=2, max_len=7):
    return [tuple(rng.integers(0, vocab_size, size=int(rng.integers(min_len, max_len + 1)))) for _ in range(n)]


def small_model(seed, dims=Dims(8, 4, 8, 2), scale=3.0):
    """176-parameter model with weights large enough to give non-trivial curvature."""
    m = TinyLM.init(seed, dims)
    for arr in m.params.values():
        arr *= scale
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
