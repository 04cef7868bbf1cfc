import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference
from mmnl.kernel import (
    choice_probabilities,
    log_sum_exp,
    occasion_log_probs,
    sequence_log_likelihood,
    softmax_curvature,
)

finite = st.floats(-50, 50, allow_nan=False)
utility_vectors = arrays(float, st.integers(1, 9), elements=finite)


def test_log_sum_exp_values():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(np.log(2), abs=1e-15)
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + np.log(2), abs=1e-12)
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000 + np.log(2), abs=1e-12)
    # extended-precision value
    assert log_sum_exp([1.0, 2.0, 3.0]) == pytest.approx(3.4076059644443803, abs=1e-14)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        log_sum_exp([])
    with pytest.raises(ValueError):
        choice_probabilities(np.zeros((3, 0)))


def test_choice_probabilities_values():
    np.testing.assert_allclose(choice_probabilities(np.zeros(7)), np.full(7, 1 / 7), atol=1e-15)
    np.testing.assert_allclose(choice_probabilities([np.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    v = [0.1025783017595525, 4.079242620929885, 3.6741632357577974, -1.5309212303630026, -0.8939085333193413]
    oracle = [0.011052634767666079, 0.5895344509427491, 0.3931745945092239,
              0.002157972898054512, 0.004080346882306468]
    np.testing.assert_allclose(choice_probabilities(v), oracle, rtol=0, atol=1e-12)


@given(utility_vectors, st.floats(-500, 500))
def test_shift_invariance(v, c):
    assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-9)
    np.testing.assert_allclose(choice_probabilities(v + c), choice_probabilities(v), atol=1e-12)


@given(utility_vectors)
def test_probabilities_on_simplex(v):
    p = choice_probabilities(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all((p >= 0) & (p <= 1))


def test_batched_axis():
    v = np.random.default_rng(0).normal(size=(3, 4, 5))
    out = log_sum_exp(v)
    assert out.shape == (3, 4)
    assert out[1, 2] == pytest.approx(log_sum_exp(v[1, 2]))


def test_curvature_values():
    np.testing.assert_allclose(softmax_curvature([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(softmax_curvature([1.0, 0.0]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        softmax_curvature([0.5, 0.6])


@pytest.mark.parametrize("seed", range(3))
def test_gradient_and_hessian_by_differences(seed):
    v = np.random.default_rng(seed).normal(size=4)
    p = choice_probabilities(v)
    np.testing.assert_allclose(central_difference(log_sum_exp, v), p, rtol=1e-6)
    hess = np.array([central_difference(lambda x, j=j: choice_probabilities(x)[j], v) for j in range(4)])
    np.testing.assert_allclose(hess, softmax_curvature(p), rtol=1e-6, atol=1e-9)


@given(arrays(float, st.integers(1, 8), elements=st.floats(0, 1)).filter(lambda a: a.sum() > 0.1))
def test_curvature_psd_rows_sum_to_zero(w):
    p = w / w.sum()
    H = softmax_curvature(p)
    np.testing.assert_allclose(H, H.T)
    np.testing.assert_allclose(H.sum(axis=1), 0.0, atol=1e-12)
    assert np.linalg.eigvalsh(H).min() >= -1e-12


def test_sequence_log_likelihood():
    x = np.zeros((5, 7, 2))
    assert sequence_log_likelihood(x[..., :0], x, np.zeros(5, int), np.zeros(2)) == pytest.approx(5 * np.log(1 / 7))
    assert sequence_log_likelihood(x[:0, :, :0], x[:0], np.zeros(0, int), np.zeros(2)) == 0.0
    X = np.array([[[0.5, 1.0], [-0.2, 0.3], [0.0, -1.0]], [[1.0, 0.0], [0.3, 0.4], [-0.5, 0.2]]])
    value = sequence_log_likelihood(X[..., :1], X[..., 1:], np.array([1, 2]), np.array([0.7, -1.2]))
    assert value == pytest.approx(-3.7645198128532137, abs=1e-13)
    with pytest.raises(ValueError):
        sequence_log_likelihood(X[..., :1], X[..., 1:], np.array([1, 2]), np.zeros(3))


def test_occasion_log_probs_nonpositive():
    v = np.random.default_rng(1).normal(size=(10, 4)) * 5
    lp = occasion_log_probs(v, np.arange(10) % 4)
    assert np.all(lp <= 0)
