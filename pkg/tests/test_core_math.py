import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from indlab.core_math import MaskMode, causal_mask, masked_softmax, matmul, softmax_backward


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)


def test_matmul_column_swap():
    out = matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(out, [[2, 1], [4, 3]])


def test_matmul_matches_triple_loop():
    g = np.random.default_rng(3)
    a, b = g.integers(-5, 5, (5, 7)).astype(float), g.integers(-5, 5, (7, 3)).astype(float)
    np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        matmul(np.ones(3), np.ones((3, 1)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_matmul_associative(seed):
    g = np.random.default_rng(seed)
    a, b, c = g.standard_normal((4, 5)), g.standard_normal((5, 6)), g.standard_normal((6, 3))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


def test_mask_modes():
    assert MaskMode.parse("Exclusive") is MaskMode.EXCLUSIVE
    np.testing.assert_array_equal(causal_mask(3, "inclusive"), np.tril(np.ones((3, 3), bool)))
    np.testing.assert_array_equal(causal_mask(3, "exclusive"), np.tril(np.ones((3, 3), bool), -1))
    with pytest.raises(ValueError):
        MaskMode.parse("diagonal")


def test_zero_scores_inclusive():
    w = masked_softmax(np.zeros((3, 3)), MaskMode.INCLUSIVE)
    np.testing.assert_allclose(w, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_zero_scores_exclusive_empty_first_row():
    w = masked_softmax(np.zeros((3, 3)), MaskMode.EXCLUSIVE)
    np.testing.assert_array_equal(w, [[0, 0, 0], [1, 0, 0], [0.5, 0.5, 0]])


def test_saturating_logit():
    s = np.zeros((3, 3))
    s[2] = [0.0, 50.0, 0.0]
    row = masked_softmax(s, "inclusive")[2]
    direct = np.exp([0.0, 50.0, 0.0]) / np.exp([0.0, 50.0, 0.0]).sum()
    np.testing.assert_allclose(row, [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(row, direct, atol=1e-15)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        masked_softmax(np.zeros((2, 3)), "inclusive")
    with pytest.raises(ValueError):
        masked_softmax(np.array([[np.nan, 0], [0, 0]]), "inclusive")


scores = arrays(np.float64, (6, 6), elements=st.floats(-30, 30))


@given(scores, st.sampled_from(list(MaskMode)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(s, mode):
    w = masked_softmax(s, mode)
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.all(w[~causal_mask(6, mode)] == 0)
    first = 1 if mode is MaskMode.EXCLUSIVE else 0
    np.testing.assert_allclose(w[first:].sum(axis=1), 1.0, atol=1e-12)


@given(scores, st.floats(-100, 100), st.sampled_from(list(MaskMode)))
@settings(max_examples=60, deadline=None)
def test_softmax_shift_invariant(s, c, mode):
    np.testing.assert_allclose(masked_softmax(s + c, mode), masked_softmax(s, mode), atol=1e-12)


def test_softmax_backward_matches_finite_differences():
    g = np.random.default_rng(0)
    for mode in MaskMode:
        s = g.standard_normal((5, 5))
        upstream = g.standard_normal((5, 5))
        analytic = softmax_backward(masked_softmax(s, mode), upstream)
        fd = np.zeros_like(s)
        h = 1e-6
        for i in range(5):
            for j in range(5):
                e = np.zeros_like(s)
                e[i, j] = h
                fd[i, j] = np.sum(upstream * (masked_softmax(s + e, mode) - masked_softmax(s - e, mode))) / (2 * h)
        np.testing.assert_allclose(analytic, fd, atol=1e-8)
    # empty row gets no gradient
    assert np.all(softmax_backward(masked_softmax(s, "exclusive"), upstream)[0] == 0)
