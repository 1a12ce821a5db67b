import numpy as np
import pytest

from scfm import autodiff as ad
from scfm.autodiff import Tensor, eval_and_grad
from scfm.errors import DomainError
from scfm.networks import (Mlp, MlpSpec, decode, endpoint_encode, mean_forward, mlp_flops,
                           reparam_sample, time_features)

from conftest import small_model


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((2, 3))
    with pytest.raises(ValueError):
        MlpSpec((2, 0, 3))
    with pytest.raises(ValueError):
        MlpSpec((2, 4, 3), activation="relu")


def test_param_count():
    spec = MlpSpec((7, 16, 16, 2))
    mlp = Mlp.init(spec, np.random.default_rng(0))
    assert spec.n_params() == (7 + 1) * 16 + (16 + 1) * 16 + (16 + 1) * 2
    assert sum(p.size for p in mlp.named_parameters("m").values()) == spec.n_params()


def test_bare_trunk_fresh_output_is_zero():
    m = small_model(mean_skip=False)
    x = np.random.default_rng(0).standard_normal((5, 2))
    out = mean_forward(m.net, x, np.full(5, 0.3))
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_skip_trunk_fresh_output_is_blend():
    m = small_model()
    x = np.random.default_rng(0).standard_normal((5, 2))
    t = np.linspace(0.0, 1.0, 5)
    out = mean_forward(m.net, x, t)
    np.testing.assert_array_equal(out.data, (1.0 - t)[:, None] * x)


def test_time_features_matter(model):
    x = np.ones((1, 2))
    a = mean_forward(model.net, x, np.array([0.2])).data
    b = mean_forward(model.net, x, np.array([0.9])).data
    assert np.any(a != b)
    assert time_features(np.array([0.25])).shape == (1, 5)


def test_shape_contract(model):
    assert mean_forward(model.net, np.zeros((1, 2)), np.array([0.5])).shape == (1, 2)


def test_time_outside_unit_interval(model):
    with pytest.raises(DomainError):
        mean_forward(model.net, np.zeros((2, 2)), np.array([0.5, 1.2]))
    with pytest.raises(DomainError):
        mean_forward(model.net, np.zeros((1, 2)), np.array([-0.01]))


@pytest.mark.parametrize("skip", [True, False])
def test_shared_network_slice(skip):
    m = small_model(zero_init=False, mean_skip=skip)
    x = np.random.default_rng(1).standard_normal((6, 2)) * 3
    mu_z, sigma, mu_eps = endpoint_encode(m.net, x)
    full = mean_forward(m.net, x, np.ones(6)).data
    assert np.array_equal(np.concatenate([mu_z.data, mu_eps.data], axis=1), full)
    assert np.all(sigma.data > 0)


def test_fresh_encoder_values(fresh_model):
    x = np.random.default_rng(2).standard_normal((4, 2))
    _, sigma, mu_eps = endpoint_encode(fresh_model.net, x)
    assert np.array_equal(sigma.data, np.ones((4, 1)))
    assert np.array_equal(mu_eps.data, np.zeros((4, 1)))


def test_outputs_finite_on_large_inputs(model):
    x = np.random.default_rng(3).uniform(-10, 10, (50, 2))
    for t in (0.0, 0.5, 1.0):
        assert np.all(np.isfinite(mean_forward(model.net, x, np.full(50, t)).data))
    assert all(np.all(np.isfinite(o.data)) for o in endpoint_encode(model.net, x))


def test_decode_zero_init_and_determinism(fresh_model, model):
    z = np.array([[0.3], [-1.0]])
    assert np.array_equal(decode(fresh_model.decoder, z).data, np.zeros((2, 2)))
    assert np.array_equal(decode(model.decoder, z).data, decode(model.decoder, z).data)


def test_decode_stochastic_seeded(model):
    z = np.zeros((3, 1))
    a = decode(model.decoder, z, np.random.default_rng(7), stochastic=True).data
    b = decode(model.decoder, z, np.random.default_rng(7), stochastic=True).data
    c = decode(model.decoder, z, np.random.default_rng(8), stochastic=True).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        decode(model.decoder, z, None, stochastic=True)


def test_reparam_sample():
    mu = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    sigma = Tensor(np.array([[0.5, 2.0]]), requires_grad=True)
    xi = np.array([[0.3, -1.2]])
    z = reparam_sample(mu, sigma, None, xi=xi)
    np.testing.assert_array_equal(z.data, mu.data + sigma.data * xi)
    w = np.array([[2.0, 3.0]])
    g = eval_and_grad((z * w).sum(), [mu, sigma])
    np.testing.assert_array_equal(g[mu].data, w)
    np.testing.assert_array_equal(g[sigma].data, w * xi)
    zero = reparam_sample(mu, sigma, None, xi=np.zeros((1, 2)))
    np.testing.assert_array_equal(zero.data, mu.data)


def test_reparam_tiny_and_bad_sigma():
    z = reparam_sample(np.ones((100, 1)), np.full((100, 1), 1e-12), np.random.default_rng(0))
    assert np.all(np.abs(z.data - 1.0) <= 1e-12 * 10)
    with pytest.raises(DomainError):
        reparam_sample(np.ones((1, 1)), np.zeros((1, 1)), np.random.default_rng(0))


def test_flops_examples():
    assert mlp_flops((2, 64, 2)) == 512
    assert mlp_flops((2, 64, 64, 2)) == 8704
