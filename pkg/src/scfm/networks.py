"""MLP building blocks: the shared recognition network and the decoder.

The recognition trunk maps ``concat(x_t, time_features(t))`` to the
posterior mean over the source endpoint x0 = (z, eps), blended with x_t
through a (1 - t) skip so the induced velocity stays bounded near t = 0
(a fresh network therefore predicts mu = (1 - t) x_t). At t = 1 its first
``d_z`` outputs double as the encoder mean, and a small variance head on
the trunk's last hidden layer supplies the encoder's log-variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError

LOGVAR_CLAMP = 10.0
N_TIME_FEATURES = 5


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    final_layer_zero_init: bool = True

    def __post_init__(self):
        if len(self.layer_widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be >= 1: {self.layer_widths}")
        if self.activation not in ("tanh", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def n_params(self) -> int:
        w = self.layer_widths
        return sum((a + 1) * b for a, b in zip(w[:-1], w[1:]))

    def flops(self) -> int:
        return mlp_flops(self.layer_widths)


def mlp_flops(widths) -> int:
    """Multiply-adds of one forward pass, counted as 2 flops each."""
    return sum(2 * a * b for a, b in zip(widths[:-1], widths[1:]))


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        weights, biases = [], []
        w = spec.layer_widths
        last = len(w) - 2
        for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
            if i == last and spec.final_layer_zero_init:
                W = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                W = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            weights.append(Tensor(W, requires_grad=True))
            biases.append(Tensor(b, requires_grad=True))
        return cls(spec, weights, biases)

    def _act(self, h):
        return ad.tanh(h) if self.spec.activation == "tanh" else ad.softplus(h)

    def forward_with_hidden(self, x) -> tuple[Tensor, Tensor]:
        """Output and the last hidden activation."""
        h = ad.as_tensor(x)
        n = len(self.weights)
        for i in range(n - 1):
            h = self._act(h @ self.weights[i] + self.biases[i])
        return h @ self.weights[-1] + self.biases[-1], h

    def __call__(self, x) -> Tensor:
        return self.forward_with_hidden(x)[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W
            out[f"{prefix}.b{i}"] = b
        return out


@dataclass
class RecognitionNet:
    trunk: Mlp
    var_head: Mlp
    d_z: int
    d_eps: int
    skip: bool = True  # mu = (1-t) x_t + t * trunk; False gives the bare trunk

    @property
    def D(self) -> int:
        return self.d_z + self.d_eps

    def __post_init__(self):
        if self.trunk.spec.layer_widths[-1] != self.D:
            raise ValueError("trunk output extent must equal D")
        if self.var_head.spec.layer_widths[-1] != self.d_z:
            raise ValueError("variance head output extent must equal d_z")


@dataclass
class Decoder:
    mlp: Mlp
    obs_scale: float = field(default=1.0)


def time_features(t) -> np.ndarray:
    """[t, sin 2pi t, cos 2pi t, sin 4pi t, cos 4pi t] per row."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = 2.0 * np.pi * t
    return np.concatenate([t, np.sin(w), np.cos(w), np.sin(2 * w), np.cos(2 * w)], axis=1)


def _check_time(t: np.ndarray):
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError("t must lie in [0, 1]")


def _trunk(net: RecognitionNet, x_t, t) -> tuple[Tensor, Tensor]:
    x_t = ad.as_tensor(x_t)
    t = np.broadcast_to(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                        (x_t.shape[0],))
    _check_time(t)
    inp = ad.concat([x_t, Tensor(time_features(t))], axis=1)
    raw, hidden = net.trunk.forward_with_hidden(inp)
    if not net.skip:
        return raw, hidden
    # skip connection: mu = (1-t) x_t + t * raw keeps the induced field x - raw
    # bounded as t -> 0; at t = 1 the output is raw itself
    tc = t.reshape(-1, 1)
    return Tensor(1.0 - tc) * x_t + Tensor(tc) * raw, hidden


def mean_forward(net: RecognitionNet, x_t, t) -> Tensor:
    """Posterior-mean estimate mu_phi(x_t, t), shape [B, D]."""
    return _trunk(net, x_t, t)[0]


def endpoint_encode(net: RecognitionNet, x1) -> tuple[Tensor, Tensor, Tensor]:
    """Encoder (mu_z, sigma_z) and exogenous mean mu_eps read off the trunk at t = 1."""
    x1 = ad.as_tensor(x1)
    mu, hidden = _trunk(net, x1, np.ones(x1.shape[0]))
    mu_z = mu[:, : net.d_z]
    mu_eps = mu[:, net.d_z:]
    log_var = ad.clamp(net.var_head(hidden), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    sigma_z = ad.exp(0.5 * log_var)
    return mu_z, sigma_z, mu_eps


def decode(dec: Decoder, z, rng: np.random.Generator | None = None,
           stochastic: bool = False) -> Tensor:
    """Decoder mean, optionally plus unit-scale observation noise."""
    out = dec.mlp(z)
    if stochastic:
        if rng is None:
            raise ValueError("stochastic decoding needs an rng")
        out = out + dec.obs_scale * rng.standard_normal(out.shape)
    return out


def reparam_sample(mu, sigma, rng: np.random.Generator | None, xi=None) -> Tensor:
    """z = mu + sigma * xi with xi ~ N(0, I); ``xi`` may be supplied directly."""
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("sigma must be strictly positive")
    if xi is None:
        xi = rng.standard_normal(mu.shape)
    return mu + sigma * xi
