import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from retainsynth.gradcore import (
    AlignmentError,
    ModuleGradients,
    cosine,
    dot,
    flatten,
    norm,
    norm_sq,
    unflatten,
    weighted_sum,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def vec_pair(n_max=16):
    return st.integers(1, n_max).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))
    )


@pytest.mark.parametrize("a, b, expected", [((1, 1), (1, 1), 2), ((-3, 1), (1, 1), -2), ((0, 0), (5, 7), 0)])
def test_dot_examples(a, b, expected):
    assert dot(a, b) == expected


@pytest.mark.parametrize("a, expected", [((1, 1), 2), ((0, 0), 0), ((-2, 2), 8)])
def test_norm_sq_examples(a, expected):
    assert norm_sq(a) == expected


def test_norm_examples():
    assert norm((3, 4)) == 5.0
    assert norm((0, 0)) == 0.0
    # squaring these would underflow to zero
    assert norm((3e-200, 4e-200)) == pytest.approx(5e-200, rel=1e-15)
    assert norm([[3, 4], [0, 0]]).tolist() == [5.0, 0.0]


@given(arrays(np.float64, st.integers(1, 16), elements=finite))
def test_norm_matches_hypot(a):
    assert norm(a) == pytest.approx(math.hypot(*a), rel=1e-14)


def test_cosine_examples():
    assert cosine((1, 0), (0, 1)) == 0
    assert cosine((2, 2), (1, 1)) == pytest.approx(1.0, abs=1e-15)
    assert cosine((-1, 3), (1, 1)) == pytest.approx(2 / math.sqrt(20), abs=1e-15)


def test_cosine_zero_vector_convention():
    assert cosine((0, 0), (1, 2)) == 0.0
    assert cosine((1e-13, 0), (1, 2)) == 0.0


def test_length_mismatch_raises():
    with pytest.raises(AlignmentError):
        dot((1, 2), (1, 2, 3))
    with pytest.raises(AlignmentError):
        cosine((1, 2), (1,))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        dot((1, np.nan), (1, 1))
    with pytest.raises(ValueError):
        ModuleGradients({"a": [np.inf]})


def test_batched_rows_match_single():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    got = cosine(a, b)
    for i in range(5):
        assert got[i] == cosine(a[i], b[i])


@given(vec_pair())
def test_dot_symmetric_and_cosine_bounded(pair):
    a, b = pair
    assert dot(a, b) == dot(b, a)
    assert -1.0 <= cosine(a, b) <= 1.0


def test_weighted_sum_examples():
    def mg(*v):
        return ModuleGradients({"m": v})

    assert np.array_equal(weighted_sum(1, mg(1, 0), 1, mg(0, 1))["m"], [1, 1])
    assert np.array_equal(weighted_sum(0, mg(5, 5), 1, mg(2, 3))["m"], [2, 3])
    assert np.array_equal(weighted_sum(0.5, mg(2, 0), 0.1, mg(0, 10))["m"], [1, 1])


def test_weighted_sum_requires_alignment():
    a = ModuleGradients({"x": [1.0, 2.0]})
    with pytest.raises(AlignmentError):
        weighted_sum(1, a, 1, ModuleGradients({"y": [1.0, 2.0]}))
    with pytest.raises(AlignmentError):
        weighted_sum(1, a, 1, ModuleGradients({"x": [1.0]}))


@given(
    vec_pair(),
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(-10, 10),
)
def test_weighted_sum_bilinear(pair, al, ga, al2, ga2):
    a = ModuleGradients({"m": pair[0]})
    b = ModuleGradients({"m": pair[1]})
    lhs = weighted_sum(al, a, ga, b)["m"] + weighted_sum(al2, a, ga2, b)["m"]
    rhs = weighted_sum(al + al2, a, ga + ga2, b)["m"]
    # rounding of the coefficient sums is bounded by the size of the terms involved
    scale = (abs(al) + abs(al2)) * np.abs(pair[0]) + (abs(ga) + abs(ga2)) * np.abs(pair[1])
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * np.maximum(scale, 1e-300) + 1e-300)


def test_flatten_examples():
    m = ModuleGradients({"a": (1, 2), "b": (3,)})
    assert flatten(m).tolist() == [1, 2, 3]
    with pytest.raises(ValueError, match="empty"):
        ModuleGradients({"a": ()})
    assert unflatten(flatten(m), m.schema) == m


@settings(max_examples=50)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.data())
def test_unflatten_flatten_round_trip(lengths, data):
    schema = tuple((f"m{i}", n) for i, n in enumerate(lengths))
    vec = data.draw(arrays(np.float64, sum(lengths), elements=finite))
    assert np.array_equal(flatten(unflatten(vec, schema)), vec)


def test_unflatten_wrong_length():
    with pytest.raises(AlignmentError):
        unflatten([1.0, 2.0], (("a", 3),))


def test_module_gradients_is_immutable_and_ordered():
    m = ModuleGradients([("z", [1.0]), ("a", [2.0, 3.0])])
    assert list(m) == ["z", "a"]
    with pytest.raises(ValueError):
        m["z"][0] = 5.0
    with pytest.raises(ValueError, match="duplicate"):
        ModuleGradients([("a", [1.0]), ("a", [2.0])])
