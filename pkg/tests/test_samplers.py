import numpy as np
import pytest

from picnn import autodiff as ad
from picnn.autodiff import Tensor
from picnn.samplers import (DomainError, bernoulli_st, bernoulli_st_backward, bernoulli_st_sample,
                            categorical_st, categorical_st_backward, categorical_st_sample, gumbel_noise,
                            gumbel_softmax_sample, make_rng, select_class)


class FixedRng:
    """Stand-in generator whose ``random`` returns preset values (draw = 1 - value)."""

    def __init__(self, values):
        self.values = np.asarray(values, np.float64)

    def random(self, shape=None):
        return self.values.reshape(shape) if shape is not None else float(self.values)


def three_sigma(n, p):
    return 3 * np.sqrt(n * p * (1 - p))


# ---------------------------------------------------------------- Bernoulli

def test_bernoulli_extremes():
    rng = np.random.default_rng(0)
    assert np.all(bernoulli_st_sample(np.ones(1000), rng).z == 1)
    assert np.all(bernoulli_st_sample(np.zeros(1000), rng).z == 0)


def test_bernoulli_rejects_out_of_range():
    rng = np.random.default_rng(0)
    for bad in ([1.1], [-0.01], [np.nan]):
        with pytest.raises(DomainError):
            bernoulli_st_sample(np.array(bad), rng)


def test_bernoulli_fires_iff_p_at_least_epsilon():
    # ties count as firing
    av = bernoulli_st_sample(np.array([0.3, 0.3, 0.3]), FixedRng([0.7, 0.8, 0.6]))
    np.testing.assert_array_equal(av.epsilon, 1 - np.array([0.7, 0.8, 0.6]))
    np.testing.assert_array_equal(av.z, (av.p >= av.epsilon).astype(np.float32))
    assert av.z[1] == 1 and av.z[2] == 0


def test_bernoulli_mean_three_sigma():
    n = 100_000
    z = bernoulli_st_sample(np.full(n, 0.3), np.random.default_rng(1)).z
    assert abs(z.mean() - 0.3) <= 3 * np.sqrt(0.3 * 0.7 / n)


def test_bernoulli_identity_exact():
    # probabilities arrive in float32 storage; offsets are kept in float64
    rng = np.random.default_rng(2)
    p = rng.random(10_000).astype(np.float32)
    av = bernoulli_st_sample(p, rng)
    assert set(np.unique(av.z)) <= {0.0, 1.0}
    assert np.array_equal(av.z - av.eta, p)
    assert np.array_equal(av.p + av.eta, av.z.astype(np.float64))


def test_bernoulli_backward_identity():
    for g in ([1.0, -2.0, 0.5], [0.0, 0.0, 0.0]):
        g = np.array(g)
        assert bernoulli_st_backward(g).tobytes() == g.tobytes()
    av = bernoulli_st_sample(np.array([0.2, 0.9]), np.random.default_rng(0))
    g = np.array([0.25, -3.0])
    assert av.backward(g).tobytes() == g.tobytes()


def test_bernoulli_surrogate_moves_with_p_under_frozen_epsilon():
    p = np.array([0.2, 0.6, 0.9])
    av = bernoulli_st_sample(p, np.random.default_rng(3))
    delta = 1e-4
    gap = np.abs(p - av.epsilon).min()
    assert gap > delta  # perturbation stays on the same side of each threshold
    moved = bernoulli_st_sample(p + delta, FixedRng(1 - av.epsilon))
    np.testing.assert_array_equal(moved.z, av.z)
    # surrogate z = p + eta with eta frozen
    np.testing.assert_allclose((p + delta + av.eta) - (p + av.eta), delta, rtol=1e-9)


def test_bernoulli_graph_gradient_is_straight_through():
    p = Tensor(np.array([0.2, 0.7, 0.5]), requires_grad=True, dtype=np.float64)
    z, av = bernoulli_st(p, np.random.default_rng(0))
    w = np.array([1.5, -2.0, 0.25])
    ad.backward(ad.sum(ad.mul(z, Tensor(w, dtype=np.float64))))
    np.testing.assert_array_equal(p.grad, w)
    np.testing.assert_array_equal(z.data, av.z)


# ---------------------------------------------------------------- categorical

def test_categorical_one_hot_input_is_returned():
    rng = np.random.default_rng(0)
    e = np.array([0.0, 0.0, 1.0, 0.0])
    for _ in range(50):
        np.testing.assert_array_equal(categorical_st_sample(e, rng).y_tilde, e)


def test_categorical_boundary_left_open_right_closed():
    # xi = 0.3 sits on the right edge of the first interval (0, 0.3]
    assert select_class(np.array([0.3, 0.7]), np.array([0.3]))[0] == 0
    assert select_class(np.array([0.3, 0.7]), np.array([0.3 + 1e-12]))[0] == 1
    assert select_class(np.array([0.0, 1.0]), np.array([1e-300]))[0] == 1
    assert select_class(np.array([0.5, 0.5]), np.array([1.0]))[0] == 1


def test_categorical_selected_index_brackets_xi():
    rng = np.random.default_rng(4)
    y1 = rng.dirichlet(np.ones(5), size=2000)
    pl = categorical_st_sample(y1, rng)
    cum = np.cumsum(y1, axis=1)
    lo = np.where(pl.index > 0, cum[np.arange(2000), np.maximum(pl.index - 1, 0)], 0.0)
    hi = cum[np.arange(2000), pl.index]
    assert np.all(lo < pl.xi + 1e-12) and np.all(pl.xi <= hi + 1e-12)


def test_categorical_rejects_bad_rows():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        categorical_st_sample(np.array([-0.1, 1.1]), rng)
    with pytest.raises(DomainError):
        categorical_st_sample(np.array([0.5, 0.6]), rng)
    categorical_st_sample(np.array([0.5, 0.5 + 5e-6]), rng)  # within tolerance


def test_categorical_uniform_k4_three_sigma():
    n = 100_000
    pl = categorical_st_sample(np.full((n, 4), 0.25), np.random.default_rng(5))
    freq = np.bincount(pl.index, minlength=4) / n
    assert np.all(np.abs(freq - 0.25) <= 0.0045)


def test_categorical_identity_exact():
    rng = np.random.default_rng(6)
    y1 = rng.dirichlet(np.ones(6), size=10_000).astype(np.float32)
    pl = categorical_st_sample(y1, rng)
    assert np.all(pl.y_tilde.sum(axis=1) == 1)
    assert np.array_equal(pl.y_tilde - pl.tau, y1)


def test_categorical_identity_float64_within_one_ulp():
    rng = np.random.default_rng(6)
    y1 = rng.dirichlet(np.ones(6), size=10_000)
    pl = categorical_st_sample(y1, rng)
    assert np.max(np.abs(pl.y_tilde - pl.tau - y1)) <= np.finfo(np.float64).eps


def test_categorical_backward_identity():
    for g in ([0.1, 0.2, 0.3], [0.0, 0.0, 0.0]):
        g = np.array(g)
        assert categorical_st_backward(g).tobytes() == g.tobytes()


def test_categorical_surrogate_moves_with_y1_under_frozen_xi():
    y1 = np.array([0.2, 0.5, 0.3])
    pl = categorical_st_sample(y1, FixedRng(1 - 0.45))  # xi = 0.45, inside (0.2, 0.7]
    delta = np.array([0.01, -0.01, 0.0])
    moved = categorical_st_sample(y1 + delta, FixedRng(1 - 0.45))
    np.testing.assert_array_equal(moved.y_tilde, pl.y_tilde)
    np.testing.assert_allclose((y1 + delta + pl.tau) - (y1 + pl.tau), delta, atol=1e-15)


def test_categorical_graph_gradient_is_straight_through():
    y1 = Tensor(np.array([[0.1, 0.6, 0.3]]), requires_grad=True, dtype=np.float64)
    yt, _ = categorical_st(y1, np.random.default_rng(0))
    w = np.array([[2.0, -1.0, 0.5]])
    ad.backward(ad.sum(ad.mul(yt, Tensor(w, dtype=np.float64))))
    np.testing.assert_array_equal(y1.grad, w)


# ---------------------------------------------------------------- Gumbel

def test_gumbel_high_temperature_flattens():
    out = gumbel_softmax_sample(np.array([1.0, -2.0, 0.5, 3.0]), 1e6, np.random.default_rng(0))
    assert np.all(np.abs(out - 0.25) < 1e-3)


def test_gumbel_dominant_logit():
    logits = np.zeros(5)
    logits[2] = 1e6
    out = gumbel_softmax_sample(logits, 0.01, np.random.default_rng(0))
    assert out.argmax() == 2 and out.max() > 0.999


def test_gumbel_max_frequency():
    n = 100_000
    out = gumbel_softmax_sample(np.zeros((n, 2)), 1.0, np.random.default_rng(7))
    assert abs((out.argmax(axis=1) == 0).mean() - 0.5) <= 0.0047


def test_gumbel_temperature_must_be_positive():
    for t in (0.0, -1.0):
        with pytest.raises(DomainError):
            gumbel_softmax_sample(np.zeros(3), t, np.random.default_rng(0))


def test_gumbel_noise_finite_at_clamped_extremes():
    g = gumbel_noise(FixedRng([0.0, 1.0]), (2,))
    assert np.all(np.isfinite(g))


# ---------------------------------------------------------------- rng

def test_seed_determinism():
    a = bernoulli_st_sample(np.full(100, 0.5), make_rng(9)).z
    b = bernoulli_st_sample(np.full(100, 0.5), make_rng(9)).z
    assert np.array_equal(a, b)
    c = categorical_st_sample(np.full((100, 3), 1 / 3), make_rng(9)).index
    d = categorical_st_sample(np.full((100, 3), 1 / 3), make_rng(9)).index
    assert np.array_equal(c, d)


def test_worker_streams_differ():
    a = make_rng(5, 0).random(10)
    b = make_rng(5, 1).random(10)
    assert not np.array_equal(a, b)
    assert np.array_equal(make_rng(5, 1).random(10), np.random.default_rng(5 ^ 1).random(10))
