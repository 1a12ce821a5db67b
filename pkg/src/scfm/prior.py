"""Learnable diagonal Gaussian-mixture prior over the structured latent."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError

LOG_2PI = math.log(2.0 * math.pi)


MEAN_INIT_SCALE = 2.0
_STD_NORMAL = NormalDist()


@dataclass
class GmmPrior:
    logits: Tensor      # [K]
    means: Tensor       # [K, d_z]
    log_scales: Tensor  # [K, d_z]

    @property
    def K(self) -> int:
        return self.logits.shape[0]

    @property
    def d_z(self) -> int:
        return self.means.shape[1]

    @classmethod
    def init(cls, K: int, d_z: int, rng: np.random.Generator,
             mean_scale: float = MEAN_INIT_SCALE) -> "GmmPrior":
        """Uniform weights, unit scales, means stratified over N(0, mean_scale^2).

        Each coordinate takes the midpoint quantile of every equal-mass
        stratum of the normal, shuffled across components (a Latin-hypercube
        design), so no two components start on top of each other.
        """
        u = (np.stack([rng.permutation(K) for _ in range(d_z)], axis=1)
             + 0.5) / K
        means = mean_scale * np.vectorize(_STD_NORMAL.inv_cdf)(u)
        return cls(
            logits=Tensor(np.zeros(K), requires_grad=True),
            means=Tensor(means, requires_grad=True),
            log_scales=Tensor(np.zeros((K, d_z)), requires_grad=True),
        )

    @classmethod
    def fixed(cls, weights, means, scales) -> "GmmPrior":
        """Constant prior from explicit weights/means/scales (tests, oracles)."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), means.shape)
        return cls(Tensor(np.log(np.asarray(weights, dtype=np.float64))),
                   Tensor(means), Tensor(np.log(scales)))

    def weights(self) -> np.ndarray:
        lg = self.logits.data
        e = np.exp(lg - lg.max())
        return e / e.sum()

    def named_parameters(self) -> dict[str, Tensor]:
        return {"prior.logits": self.logits, "prior.means": self.means,
                "prior.log_scales": self.log_scales}


def component_log_density(prior: GmmPrior, z) -> Tensor:
    """log pi_k + log N(z; mu_k, diag sigma_k^2) for every row and component: [B, K]."""
    z = ad.as_tensor(z)
    B, d = z.shape
    K = prior.K
    diff = z.reshape(B, 1, d) - prior.means.reshape(1, K, d)
    scaled = diff / ad.exp(prior.log_scales).reshape(1, K, d)
    quad = ad.square(scaled).sum(axis=2)
    log_norm = prior.log_scales.sum(axis=1).reshape(1, K) + 0.5 * d * LOG_2PI
    log_pi = prior.logits - ad.logsumexp(prior.logits)
    return log_pi.reshape(1, K) - 0.5 * quad - log_norm


def log_prob(prior: GmmPrior, z) -> Tensor:
    return ad.logsumexp(component_log_density(prior, z), axis=1)


def responsibilities(prior: GmmPrior, z) -> np.ndarray:
    with ad.no_grad():
        comp = component_log_density(prior, z).data
    comp = comp - comp.max(axis=1, keepdims=True)
    r = np.exp(comp)
    return r / r.sum(axis=1, keepdims=True)


def sample(prior: GmmPrior, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral draw: component index first, then the Gaussian coordinate."""
    cdf = np.cumsum(prior.weights())
    u = rng.random(n)
    comp = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), prior.K - 1)
    xi = rng.standard_normal((n, prior.d_z))
    z = prior.means.data[comp] + np.exp(prior.log_scales.data[comp]) * xi
    return z, comp


def diag_gaussian_log_density(z, mu, sigma) -> Tensor:
    """Row-wise log N(z; mu, diag sigma^2), summed over the last axis."""
    z, mu, sigma = ad.as_tensor(z), ad.as_tensor(mu), ad.as_tensor(sigma)
    d = z.shape[-1]
    quad = ad.square((z - mu) / sigma).sum(axis=-1)
    return -0.5 * quad - ad.log(sigma).sum(axis=-1) - 0.5 * d * LOG_2PI


def kl_monte_carlo_samples(mu_q, sigma_q, prior: GmmPrior, n_mc: int,
                           rng: np.random.Generator, xi=None) -> Tensor:
    """Per-draw terms log q(z_s) - log p(z_s), shape [n_mc, B]."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    mu_q, sigma_q = ad.as_tensor(mu_q), ad.as_tensor(sigma_q)
    if np.any(sigma_q.data <= 0):
        raise DomainError("sigma_q must be positive")
    B, d = mu_q.shape
    if xi is None:
        xi = rng.standard_normal((n_mc, B, d))
    mu3 = mu_q.reshape(1, B, d)
    sg3 = sigma_q.reshape(1, B, d)
    z = (mu3 + sg3 * xi).reshape(n_mc * B, d)
    log_q = diag_gaussian_log_density(z.reshape(n_mc, B, d), mu3, sg3)
    log_p = log_prob(prior, z).reshape(n_mc, B)
    return log_q - log_p


def kl_monte_carlo(mu_q, sigma_q, prior: GmmPrior, n_mc: int, rng: np.random.Generator) -> Tensor:
    """Reparameterized Monte-Carlo KL(q || p_psi) per row: [B]."""
    return kl_monte_carlo_samples(mu_q, sigma_q, prior, n_mc, rng).mean(axis=0)
