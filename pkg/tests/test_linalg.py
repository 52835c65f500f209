import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvcl.errors import DimensionMismatchError, EmptyInputError, ZeroNormError
from mvcl.linalg import Rng, cosine_matrix, cosine_sim, l2_normalize, log_softmax_row, mix

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def nonzero_vec(dim):
    return arrays(np.float64, dim, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_cosine_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == 0.7071067811865475


def test_cosine_errors_are_distinct():
    with pytest.raises(DimensionMismatchError):
        cosine_sim([1, 0], [1, 0, 0])
    with pytest.raises(ZeroNormError):
        cosine_sim([0, 0], [1, 0])
    assert DimensionMismatchError.code != ZeroNormError.code


def test_cosine_is_clamped():
    v = np.array([0.1, 0.2, 0.3]) * 3.0000000000000004
    assert -1.0 <= cosine_sim(v, v) <= 1.0
    assert np.all(np.abs(cosine_matrix(np.ones((3, 4)), np.ones((2, 4)))) <= 1.0)


@settings(max_examples=200, deadline=None)
@given(nonzero_vec(5), nonzero_vec(5), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, alpha, beta):
    assert cosine_sim(a, b) == cosine_sim(b, a)
    assert abs(cosine_sim(alpha * a, beta * b) - cosine_sim(a, b)) <= 1e-12


def test_log_softmax_examples():
    assert log_softmax_row([0.0]).tolist() == [0.0]
    out = log_softmax_row([2.5, 2.5, 2.5])
    np.testing.assert_allclose(out, [-math.log(3)] * 3, rtol=0, atol=1e-15)
    big = log_softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(big))
    # exact shifted computation: log(1 / (1 + e^-1000)) and -1000 - log(1 + e^-1000)
    assert abs(big[0]) <= 1e-300
    assert big[1] == -1000.0


def test_log_softmax_empty():
    with pytest.raises(EmptyInputError):
        log_softmax_row([])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_log_softmax_normalizes(s):
    assert abs(np.exp(log_softmax_row(s)).sum() - 1.0) <= 1e-12


def test_log_softmax_saturated_tail_keeps_relative_precision():
    # log p_0 = -log(1 + e^-40) = -e^-40 (to first order); a naive log(sum) rounds this to 0
    out = log_softmax_row([40.0, 0.0])
    assert out[0] == pytest.approx(-math.log1p(math.exp(-40.0)), rel=1e-12)
    assert out[0] != 0.0


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], rtol=0, atol=1e-15)
    assert l2_normalize([1, 0]).tolist() == [1.0, 0.0]
    with pytest.raises(ZeroNormError):
        l2_normalize([0, 0])


@settings(max_examples=100, deadline=None)
@given(nonzero_vec(7))
def test_l2_normalize_unit(v):
    assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) <= 1e-12


def test_rng_streams_repeat():
    a, b = Rng(99), Rng(99)
    assert np.array_equal(a.normal(10_000), b.normal(10_000))
    assert not np.array_equal(Rng(1).normal(10), Rng(2).normal(10))


def test_mix_is_stable_and_separates_keys():
    assert mix(0, 1) == mix(0, 1)
    assert len({mix(0, 1), mix(0, 2), mix(1, 1), mix(0, 1, 0)}) == 4
    assert mix(0, 2**32) != mix(0, 0, 1)
    assert 0 <= mix(2**64 - 1, 5) < 2**63
