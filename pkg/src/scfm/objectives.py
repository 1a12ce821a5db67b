"""Training objectives, the optimizer and the joint training loop.

The objective is the sum of a flow-matching term (Gaussian negative
log-likelihood of the source endpoint under the posterior-mean estimate)
and an endpoint term (decoder reconstruction, latent KL against the GMM
prior, a penalty pulling the exogenous mean to zero and, optionally, a
total-correlation penalty).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .errors import DomainError, NumericalError
from .interpolant import CouplingBatch, encoder_coupling_batch
from .networks import decode, endpoint_encode, mean_forward, reparam_sample
from .prior import LOG_2PI, diag_gaussian_log_density, kl_monte_carlo, log_prob
from .rng import substream

ADAM_EPS = 1e-8


@dataclass
class LossBreakdown:
    vfm: float
    rec: float
    kl_z: float
    r_eps: float
    tc: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def vfm_loss(model, batch: CouplingBatch, sigma_x0: float = 1.0) -> Tensor:
    """Batch mean of -log N(x0; mu_phi(x_t, t), sigma^2 I).

    The network input is held behind a stop-gradient, so this term trains
    only the recognition trunk's regression, not the encoder sample.
    """
    if sigma_x0 <= 0:
        raise DomainError("sigma_x0 must be positive")
    mu = mean_forward(model.net, ad.stop_gradient(batch.x_t), batch.t)
    D = mu.shape[1]
    sq = ad.square(mu - ad.stop_gradient(batch.x0)).sum(axis=1)
    nll = sq * (0.5 / sigma_x0**2) + 0.5 * D * math.log(2.0 * math.pi * sigma_x0**2)
    return nll.mean()


def tc_estimate(z, mu_q, sigma_q, dataset_size: int) -> Tensor:
    """Minibatch-weighted total-correlation estimate.

    log q(z_i) and log q(z_i,d) are approximated by log-sum-exp over the
    batch posteriors minus log(N * B).
    """
    z, mu_q, sigma_q = ad.as_tensor(z), ad.as_tensor(mu_q), ad.as_tensor(sigma_q)
    B, d = z.shape
    if B < 2:
        raise DomainError("total-correlation estimate needs a batch of at least 2")
    if dataset_size < 1:
        raise DomainError("dataset_size must be >= 1")
    zi = z.reshape(B, 1, d)
    mj = mu_q.reshape(1, B, d)
    sj = sigma_q.reshape(1, B, d)
    # per-dimension log q(z_i,d | x_j): [B, B, d]
    per_dim = -0.5 * ad.square((zi - mj) / sj) - ad.log(sj) - 0.5 * LOG_2PI
    norm = math.log(dataset_size * B)
    log_qz = ad.logsumexp(per_dim.sum(axis=2), axis=1) - norm
    log_marg = (ad.logsumexp(per_dim, axis=1) - norm).sum(axis=1)
    return (log_qz - log_marg).mean()


def endpoint_loss(model, x1, cfg: TrainConfig, rng: np.random.Generator,
                  xi=None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(rec, kl_z, r_eps, tc) for a data batch; each a scalar Tensor."""
    x1 = ad.as_tensor(x1)
    mu_z, sigma_z, mu_eps = endpoint_encode(model.net, x1)
    if xi is None:
        xi = rng.standard_normal(mu_z.shape)
    z = reparam_sample(mu_z, sigma_z, None, xi=xi)
    rec = (0.5 * ad.square(x1 - decode(model.decoder, z)).sum(axis=1)).mean()
    kl = kl_monte_carlo(mu_z, sigma_z, model.prior, cfg.n_mc_kl, rng).mean()
    r_eps = (0.5 * ad.square(mu_eps).sum(axis=1)).mean()
    if cfg.regularizer == "beta_tcvae":
        kl_z = kl
        tc = cfg.beta * tc_estimate(z, mu_z, sigma_z, cfg.dataset_size)
    else:
        kl_z = cfg.beta * kl
        tc = Tensor(0.0)
    return rec, kl_z, r_eps, tc


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = ADAM_EPS):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    b1, b2 = betas
    t = state.t + 1
    m, v, out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1**t)
        vhat = v[k] / (1 - b2**t)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out, AdamState(m, v, t)


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float):
    return {k: decay * shadow[k] + (1 - decay) * params[k] for k in shadow}


@dataclass
class TrainState:
    adam: AdamState
    ema: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, model) -> "TrainState":
        params = {k: p.data.copy() for k, p in model.named_parameters().items()}
        return cls(AdamState.zeros_like(params), {k: v.copy() for k, v in params.items()}, 0)


def total_loss(model, x1, cfg: TrainConfig, rng: np.random.Generator,
               batch: CouplingBatch | None = None):
    """Weighted objective and its parts (as Tensors).

    ``batch`` replaces the coupling draw; its x0 and x_t only enter behind a
    stop-gradient, so a batch frozen at the current parameters gives the same
    gradient as a live one.
    """
    if batch is None:
        batch = encoder_coupling_batch(model, x1, rng)
    vfm = vfm_loss(model, batch, cfg.sigma_x0) * cfg.vfm_weight
    parts = [p * cfg.endpoint_weight for p in endpoint_loss(model, x1, cfg, rng)]
    total = vfm + parts[0] + parts[1] + parts[2] + parts[3]
    return total, (vfm, *parts)


def scfm_train_step(model, x1, cfg: TrainConfig, state: TrainState,
                    rng: np.random.Generator) -> LossBreakdown:
    """One joint gradient step on all parameters.

    Raises NumericalError, leaving the parameters untouched, when the loss
    or any gradient is not finite.
    """
    params = model.named_parameters()
    total, parts = total_loss(model, x1, cfg, rng)
    if not np.isfinite(total.data).all():
        raise NumericalError(f"non-finite loss at step {state.step}")
    grads_by_id = Tape.record(total).backward(np.ones_like(total.data))
    grads = {k: grads_by_id.get(id(p), np.zeros_like(p.data)).reshape(p.shape)
             for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k} at step {state.step}")
    values = {k: p.data for k, p in params.items()}
    new_values, state.adam = adam_step(values, grads, state.adam, cfg.lr, cfg.adam_betas)
    for k, p in params.items():
        p.data = new_values[k]
    state.ema = ema_update(state.ema, new_values, cfg.ema_decay)
    state.step += 1
    vals = [float(p.data) for p in parts]
    return LossBreakdown(*vals, total=float(total.data))


def train(model, data: np.ndarray, cfg: TrainConfig, state: TrainState | None = None,
          log: TextIO | None = None,
          callback: Callable[[int, LossBreakdown], None] | None = None) -> TrainState:
    """Run ``cfg.steps`` minibatch steps; each step draws from its own substream."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.D:
        raise DomainError(f"training data must have shape [N, {model.D}]")
    n = data.shape[0]
    if n < 2:
        raise DomainError("training data needs at least 2 rows")
    state = state or TrainState.init(model)
    B = min(cfg.batch_size, n)
    for _ in range(cfg.steps):
        step = state.step
        rng = substream(cfg.seed, "train-step", step)
        idx = rng.choice(n, size=B, replace=False)
        losses = scfm_train_step(model, data[idx], cfg, state, rng)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.write(json.dumps({"step": step, **losses.as_dict()}, sort_keys=True) + "\n")
        if callback is not None:
            callback(step, losses)
    return state


def aggregate_kl_estimate(model, x, rng: np.random.Generator, n_draws: int = 1) -> float:
    """Monte-Carlo KL(q_agg(z) || p_psi(z)) with q_agg the encoder mixture over ``x``."""
    with ad.no_grad():
        mu, sigma, _ = endpoint_encode(model.net, x)
        M, d = mu.shape
        vals = []
        for _ in range(n_draws):
            z = mu.data + sigma.data * rng.standard_normal((M, d))
            per = diag_gaussian_log_density(z.reshape(M, 1, d), mu.data.reshape(1, M, d),
                                            sigma.data.reshape(1, M, d))
            log_q = ad.logsumexp(per, axis=1).data - math.log(M)
            log_p = log_prob(model.prior, z).data
            vals.append(np.mean(log_q - log_p))
    return float(np.mean(vals))
