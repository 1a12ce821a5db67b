import numpy as np
import pytest

from scfm.autodiff import Tensor, eval_and_grad
from scfm.errors import DomainError, TimeSingularityError
from scfm.interpolant import (LINEAR, conditional_velocity, encoder_coupling_batch,
                              induced_velocity, interpolate, mu_from_velocity)
from scfm.rng import substream


def test_schedule_endpoints():
    assert LINEAR.f(0.0) == 1.0 and LINEAR.f(1.0) == 0.0
    assert LINEAR.df(0.3) == -1.0


def test_interpolate_examples():
    assert interpolate(0.0, 4.0, 0.5) == 2.0
    a = np.array([1.5, -2.0])
    np.testing.assert_array_equal(interpolate(a, a, 0.37), a)
    x0, x1 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    with pytest.raises(DomainError):
        interpolate(x0, x1, 1.5)


def test_conditional_velocity_examples():
    assert conditional_velocity(0.0, 2.0, 0.5) == 4.0
    assert conditional_velocity(1.0, 1.0, 0.5) == 0.0
    with pytest.raises(TimeSingularityError):
        conditional_velocity(0.0, 1.0, 0.0)


def test_induced_velocity_examples():
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(induced_velocity(x, x, 0.4), [0.0, 0.0])
    np.testing.assert_array_equal(induced_velocity(np.array([1.0, 0.0]), np.zeros(2), 0.5), [-2.0, 0.0])
    w = np.array([0.7, -1.1])
    np.testing.assert_array_equal(induced_velocity(w, np.zeros(2), 1.0), -w)
    with pytest.raises(TimeSingularityError):
        induced_velocity(x, x, 1e-7)


def test_mu_from_velocity():
    x1 = np.array([0.5, 1.5])
    np.testing.assert_array_equal(mu_from_velocity(x1, np.zeros(2)), x1)
    np.testing.assert_array_equal(mu_from_velocity(x1, np.array([-2.0, 0.0])), x1 + [2.0, 0.0])
    mu = np.array([3.0, -4.0])
    np.testing.assert_allclose(mu_from_velocity(x1, induced_velocity(mu, x1, 1.0)), mu, atol=1e-12)


def test_coupling_batch_shapes_and_t(model):
    x1 = np.random.default_rng(0).standard_normal((7, 2))
    b = encoder_coupling_batch(model, x1, substream(0, "cb"))
    assert b.x0.shape == (7, 2) and b.x1.shape == (7, 2) and b.t.shape == (7,)
    assert np.all((b.t >= 0) & (b.t < 1))
    np.testing.assert_array_equal(b.x_t.data, interpolate(b.x0.data, b.x1.data, b.t))
    b2 = encoder_coupling_batch(model, x1, substream(0, "cb"))
    assert np.array_equal(b.t, b2.t) and np.array_equal(b.x0.data, b2.x0.data)


def test_coupling_batch_dim_mismatch(model):
    with pytest.raises(DomainError):
        encoder_coupling_batch(model, np.zeros((3, 3)), substream(0, "cb"))


def test_coupling_targets_block_encoder(model):
    x1 = np.random.default_rng(1).standard_normal((5, 2))
    b = encoder_coupling_batch(model, x1, substream(1, "cb"))
    enc = [p for k, p in model.named_parameters().items() if k.startswith(("trunk.", "var."))]
    loss = (b.x0 * b.x0).sum() + (b.x_t * 3.0).sum()
    grads = eval_and_grad(loss, enc)
    assert all(not np.any(g.data) for g in grads.values())


def test_exogenous_marginal(model):
    x1 = np.zeros((100_000, 2))
    eps = encoder_coupling_batch(model, x1, substream(2, "cb")).x0.data[:, 1]
    se = 1 / np.sqrt(len(eps))
    assert abs(eps.mean()) <= 4 * se
    assert abs(eps.var() - 1.0) <= 4 * np.sqrt(2) * se
