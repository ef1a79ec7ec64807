import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, fd_error, softmax_categorical, total_variation
from spottune.gumbel import (GumbelNoise, gumbel_from_uniform, gumbel_max, gumbel_softmax,
                             sample_gumbel, straight_through)
from spottune.tensor import Tape, Tensor, sum_

# e / (e + 1) and 1 / (e + 1) to 40 digits (mpmath)
SIGMOID_1 = 0.7310585786300048792511592418218362743651
SIGMOID_M1 = 0.2689414213699951207488407581781637256349
EULER_GAMMA = 0.5772156649015329


def test_gumbel_of_inverse_e_is_zero():
    assert gumbel_from_uniform(math.exp(-1)) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_of_exp_minus_e_is_minus_one():
    assert gumbel_from_uniform(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-15)


def test_uniform_endpoints_are_clamped():
    g = gumbel_from_uniform([0.0, 1.0])
    assert np.all(np.isfinite(g))


def test_gumbel_mean_is_euler_gamma():
    g = sample_gumbel((1_000_000,), np.random.default_rng(0)).values
    assert abs(g.mean() - EULER_GAMMA) < 0.01


def test_sample_gumbel_shape_and_lineage():
    noise = sample_gumbel((3, 2), np.random.default_rng(0), stream="eval")
    assert noise.values.shape == (3, 2) and noise.stream == "eval"
    with pytest.raises(ValueError):
        sample_gumbel((), np.random.default_rng(0))


def test_gumbel_max_forced_argmax():
    assert gumbel_max([1.0, 2.0], GumbelNoise(np.zeros(2))) == 1


def test_gumbel_max_ties_take_lowest_index():
    assert gumbel_max([0.5, 0.5, 0.5], np.zeros(3)) == 0


def test_gumbel_max_length_mismatch():
    with pytest.raises(ValueError):
        gumbel_max([0.0, 0.0], np.zeros(3))


def _frequencies(log_alphas, draws, seed):
    z = len(log_alphas)
    noise = sample_gumbel((draws, z), np.random.default_rng(seed))
    idx = gumbel_max(np.tile(log_alphas, (draws, 1)), noise)
    return np.bincount(idx, minlength=z) / draws


def test_gumbel_max_symmetric_is_fair():
    assert abs(_frequencies([0.0, 0.0], 100_000, 1)[0] - 0.5) < 0.01


def test_gumbel_max_three_to_one():
    assert abs(_frequencies([math.log(3), 0.0], 100_000, 2)[0] - 0.75) < 0.01


@pytest.mark.parametrize("log_alphas", [[0.3, -1.2], [2.0, 0.0, -1.0, 0.5]])
def test_gumbel_max_matches_categorical(log_alphas):
    freq = _frequencies(log_alphas, 100_000, 3)
    assert total_variation(freq, softmax_categorical(log_alphas)) < 0.01


def test_gumbel_softmax_symmetric_any_tau():
    for tau in (0.1, 1.0, 5.0):
        y = gumbel_softmax([0.7, 0.7], [1.3, 1.3], tau).data
        np.testing.assert_allclose(y, [0.5, 0.5], atol=1e-15)


def test_gumbel_softmax_unit_temperature():
    y = gumbel_softmax([1.0, 0.0], [0.0, 0.0], 1.0).data
    np.testing.assert_allclose(y, [SIGMOID_1, SIGMOID_M1], rtol=1e-14)


def test_gumbel_softmax_cold_is_nearly_one_hot():
    y = gumbel_softmax([1.0, 0.0], [0.0, 0.0], 0.01).data
    assert y.max() > 1 - 1e-8


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_gumbel_softmax_rejects_nonpositive_tau(tau):
    with pytest.raises(ValueError):
        gumbel_softmax([1.0, 0.0], [0.0, 0.0], tau)


def test_temperature_sharpens_monotonically():
    rng = np.random.default_rng(5)
    for _ in range(50):
        logits, noise = rng.standard_normal(3), sample_gumbel((3,), rng)
        peaks = [gumbel_softmax(logits, noise, tau).data.max() for tau in (5, 1, 0.1, 0.01)]
        assert all(b >= a for a, b in zip(peaks, peaks[1:]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=5), st.integers(0, 2**31),
       st.sampled_from([5.0, 1.0, 0.1]), st.floats(-100, 100))
def test_straight_through_forward_properties(logits, seed, tau, shift):
    noise = sample_gumbel((len(logits),), np.random.default_rng(seed))
    sample = straight_through(logits, noise, tau)
    hard = sample.hard.data
    assert set(np.unique(hard)) <= {0.0, 1.0} and hard.sum() == 1.0
    assert abs(sample.soft.data.sum() - 1.0) < 1e-12
    assert np.argmax(sample.soft.data) == np.argmax(hard)
    shifted = straight_through(np.asarray(logits) + shift, noise, tau)
    assert np.argmax(shifted.hard.data) == np.argmax(hard) or np.isclose(
        np.sort(np.asarray(logits) + noise.values)[-1], np.sort(np.asarray(logits) + noise.values)[-2])


@pytest.mark.parametrize("tau", [5.0, 1.0, 0.1])
def test_straight_through_gradient_is_relaxed_gradient(tau):
    rng = np.random.default_rng(int(tau * 10))
    worst = 0.0
    for _ in range(20):
        logits = rng.standard_normal(4)
        noise = sample_gumbel((4,), rng)
        w = rng.standard_normal(4)
        param = Tensor(logits.copy(), requires_grad=True)
        with Tape() as tape:
            loss = sum_(straight_through(param, noise, tau).hard * Tensor(w))
        tape.backward(loss)
        numeric, = central_difference(lambda: float(gumbel_softmax(param.data, noise, tau).data @ w),
                                      [param.data])
        worst = max(worst, fd_error(param.grad, numeric))
    assert worst < 1e-4


def test_batched_straight_through_rows_independent(rng):
    logits = rng.standard_normal((6, 3, 2))
    noise = sample_gumbel((6, 3, 2), rng)
    batched = straight_through(logits, noise, 5.0)
    for i in range(6):
        for l in range(3):
            row = straight_through(logits[i, l], GumbelNoise(noise.values[i, l]), 5.0)
            np.testing.assert_array_equal(row.hard.data, batched.hard.data[i, l])
