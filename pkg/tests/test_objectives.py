import io
import json
import math

import numpy as np
import pytest

from scfm.autodiff import Tensor
from scfm.config import TrainConfig
from scfm.data import gen_gmm2d
from scfm.errors import DomainError, NumericalError
from scfm.interpolant import CouplingBatch, conditional_velocity, induced_velocity, interpolate
from scfm.networks import mean_forward
from scfm.objectives import (AdamState, TrainState, adam_step, ema_update, endpoint_loss,
                             scfm_train_step, tc_estimate, train, vfm_loss)
from scfm.prior import GmmPrior
from scfm.rng import substream

from conftest import small_model

LOG_2PI = math.log(2 * math.pi)


def batch_from(x0, x1, t):
    x0, x1, t = np.atleast_2d(x0), np.atleast_2d(x1), np.atleast_1d(t)
    return CouplingBatch(Tensor(x0), Tensor(x1), t, Tensor(interpolate(x0, x1, t)))


def test_vfm_loss_examples():
    m = small_model(mean_skip=False)  # mu == 0 everywhere
    assert vfm_loss(m, batch_from([-1.0, -1.0], [2.0, 0.5], 0.4), 1.0).item() == \
        pytest.approx(1 + LOG_2PI, abs=1e-12)
    assert vfm_loss(m, batch_from([0.0, 0.0], [2.0, 0.5], 0.4), 1.0).item() == LOG_2PI
    with pytest.raises(DomainError):
        vfm_loss(m, batch_from([0.0, 0.0], [1.0, 1.0], 0.5), 0.0)


def test_vfm_sigma_scaling():
    m = small_model(mean_skip=False)
    b = batch_from([-1.0, -1.0], [2.0, 0.5], 0.4)
    s = 0.5
    assert vfm_loss(m, b, s).item() == pytest.approx(1 / s**2 + math.log(2 * math.pi * s**2), abs=1e-12)


def test_vfm_is_time_weighted_velocity_regression(model):
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
    t = rng.uniform(0.1, 0.99, 50)
    x_t = interpolate(x0, x1, t)
    mu = mean_forward(model.net, x_t, t).data
    v_phi = induced_velocity(mu, x_t, t)
    v_cond = conditional_velocity(x0, x_t, t)
    lhs = (t[:, None] ** 2 * (v_phi - v_cond) ** 2).sum(axis=1)
    np.testing.assert_allclose(lhs, ((mu - x0) ** 2).sum(axis=1), atol=1e-10, rtol=0)


def stub_model(trunk_bias, d_z=1, d_eps=1):
    m = small_model(d_z=d_z, d_eps=d_eps, K=1, mean_skip=False)
    m.net.trunk.biases[-1].data = np.asarray(trunk_bias, dtype=float)
    m.prior = GmmPrior.fixed([1.0], [np.zeros(d_z)], 1.0)
    return m


def test_rec_zero_when_decoder_matches():
    m = small_model()
    rec, *_ = endpoint_loss(m, np.zeros((4, 2)), TrainConfig(), np.random.default_rng(0))
    assert rec.item() == 0.0


def test_r_eps_value():
    m = stub_model([0.0, 3.0, 4.0], d_z=1, d_eps=2)
    cfg = TrainConfig(d_z=1, d_eps=2, D=3)
    _, _, r_eps, tc = endpoint_loss(m, np.zeros((3, 3)), cfg, np.random.default_rng(0))
    assert r_eps.item() == pytest.approx(12.5, abs=1e-12)
    assert tc.item() == 0.0


def test_beta_vae_kl_value():
    m = stub_model([2.0, 0.0])
    n = 4096
    cfg = TrainConfig(beta=4.0, n_mc_kl=n)
    _, kl_z, _, _ = endpoint_loss(m, np.zeros((1, 2)), cfg, np.random.default_rng(0))
    se = 4.0 * 2.0 / math.sqrt(n)  # log q - log p = 2z - 2 has sd 2 under q
    assert abs(kl_z.item() - 8.0) <= 4 * se


def test_beta_doubles_kl_exactly(model):
    x = np.random.default_rng(1).standard_normal((8, 2))
    a = endpoint_loss(model, x, TrainConfig(beta=2.0), np.random.default_rng(5))[1].item()
    b = endpoint_loss(model, x, TrainConfig(beta=4.0), np.random.default_rng(5))[1].item()
    assert b == 2 * a


def test_tcvae_uses_unit_kl_and_beta_tc(model):
    x = np.random.default_rng(1).standard_normal((8, 2))
    vae = endpoint_loss(model, x, TrainConfig(beta=3.0), np.random.default_rng(5))
    tcv = endpoint_loss(model, x, TrainConfig(beta=3.0, regularizer="beta_tcvae"),
                        np.random.default_rng(5))
    assert tcv[1].item() == pytest.approx(vae[1].item() / 3.0, rel=1e-14)
    assert tcv[3].item() == pytest.approx(0.0, abs=1e-12)  # d_z = 1


def test_tc_scalar_latent_is_zero():
    rng = np.random.default_rng(0)
    mu, sg = rng.standard_normal((64, 1)), rng.uniform(0.5, 1.5, (64, 1))
    z = mu + sg * rng.standard_normal((64, 1))
    assert tc_estimate(z, mu, sg, 1).item() == pytest.approx(0.0, abs=1e-12)


def test_tc_factorized_near_zero():
    rng = np.random.default_rng(1)
    B = 512
    mu = rng.standard_normal((B, 2))
    sg = np.ones((B, 2))
    z = mu + sg * rng.standard_normal((B, 2))
    assert abs(tc_estimate(z, mu, sg, 1).item()) <= 0.1


def test_tc_correlated_gaussian():
    rng = np.random.default_rng(2)
    B, s = 2048, 0.3
    cov_mu = np.array([[1.0, 0.9], [0.9, 1.0]]) - s**2 * np.eye(2)
    mu = rng.multivariate_normal(np.zeros(2), cov_mu, size=B)
    sg = np.full((B, 2), s)
    z = mu + sg * rng.standard_normal((B, 2))
    assert abs(tc_estimate(z, mu, sg, 1).item() - (-0.5 * math.log(1 - 0.81))) <= 0.15


def test_tc_small_batch_raises():
    with pytest.raises(DomainError):
        tc_estimate(np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)), 10)


def test_adam_examples():
    p = {"w": np.array([0.0])}
    s = AdamState.zeros_like(p)
    p1, s = adam_step(p, {"w": np.array([1.0])}, s, 0.1)
    assert p1["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    p2, s = adam_step(p1, {"w": np.array([1.0])}, s, 0.1)
    assert p2["w"][0] - p1["w"][0] == pytest.approx(-0.1, abs=1e-8)
    q = {"w": np.array([1.5, -2.0])}
    st = AdamState.zeros_like(q)
    for _ in range(3):
        q2, st = adam_step(q, {"w": np.zeros(2)}, st, 0.1)
        assert np.array_equal(q2["w"], q["w"])


def test_ema_examples():
    assert ema_update({"a": np.array(0.0)}, {"a": np.array(2.0)}, 0.5)["a"] == 1.0
    assert ema_update({"a": np.array(3.0)}, {"a": np.array(2.0)}, 1.0)["a"] == 3.0
    assert ema_update({"a": np.array(3.0)}, {"a": np.array(2.0)}, 0.0)["a"] == 2.0


def _run(seed, steps=5):
    m = small_model(seed=seed, zero_init=False)
    x, _ = gen_gmm2d(3, 4.0, 500, seed)
    cfg = TrainConfig(seed=seed, steps=steps, batch_size=32, K=3, dataset_size=500)
    out = []
    train(m, x, cfg, callback=lambda step, l: out.append(l))
    return m, out


def test_train_step_determinism():
    _, a = _run(0)
    _, b = _run(0)
    assert a == b
    for l in a:
        assert l.total == pytest.approx(l.vfm + l.rec + l.kl_z + l.r_eps + l.tc, abs=1e-12)


def test_total_includes_tc_when_tcvae():
    m = small_model(d_z=2, d_eps=1, zero_init=False)
    cfg = TrainConfig(d_z=2, d_eps=1, D=3, regularizer="beta_tcvae", K=3)
    l = scfm_train_step(m, np.random.default_rng(0).standard_normal((16, 3)), cfg,
                        TrainState.init(m), substream(0, "x"))
    assert l.tc != 0.0
    assert l.total == pytest.approx(l.vfm + l.rec + l.kl_z + l.r_eps + l.tc, abs=1e-12)


def test_nonfinite_loss_leaves_parameters():
    m = small_model(zero_init=False)
    before = {k: p.data.copy() for k, p in m.named_parameters().items()}
    x = np.array([[np.nan, 0.0], [1.0, 1.0]])
    with pytest.raises(NumericalError):
        scfm_train_step(m, x, TrainConfig(K=3), TrainState.init(m), substream(0, "nan"))
    for k, p in m.named_parameters().items():
        assert np.array_equal(p.data, before[k])


def test_training_reduces_loss():
    m = small_model(seed=0, K=5, zero_init=True)
    x, _ = gen_gmm2d(5, 6.0, 5000, 0)
    cfg = TrainConfig(steps=1000, batch_size=128, dataset_size=5000)
    totals = []
    train(m, x, cfg, callback=lambda step, l: totals.append(l.total))
    assert np.mean(totals[900:1000]) < np.mean(totals[0:100])


def test_train_log_lines():
    m = small_model(zero_init=False)
    x, _ = gen_gmm2d(3, 4.0, 200, 0)
    buf = io.StringIO()
    train(m, x, TrainConfig(steps=7, batch_size=16, K=3, log_every=3), log=buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["step"] for r in rows] == [0, 3, 6]
    assert set(rows[0]) == {"step", "vfm", "rec", "kl_z", "r_eps", "tc", "total"}


def test_ema_tracks_parameters():
    m = small_model(zero_init=False)
    x, _ = gen_gmm2d(3, 4.0, 200, 0)
    init = {k: p.data.copy() for k, p in m.named_parameters().items()}
    st = train(m, x, TrainConfig(steps=3, batch_size=16, K=3, ema_decay=0.0))
    for k, p in m.named_parameters().items():
        assert np.array_equal(st.ema[k], p.data)
    st1 = train(small_model(zero_init=False), x, TrainConfig(steps=3, batch_size=16, K=3, ema_decay=1.0))
    for k in init:
        assert np.array_equal(st1.ema[k], init[k])
