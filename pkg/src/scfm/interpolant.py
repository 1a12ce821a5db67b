"""Linear interpolant between source and data endpoints, and its velocities.

Conventions: x_t = f(t) x0 + (1 - f(t)) x1 with f(t) = 1 - t, so t = 0 is the
source endpoint and t = 1 the data endpoint. Functions accept numpy arrays
or Tensors; ``t`` may be a scalar or one value per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, TimeSingularityError
from .networks import endpoint_encode, reparam_sample

T_FLOOR = 1e-6


@dataclass(frozen=True)
class Schedule:
    f: Callable = lambda t: 1.0 - t
    df: Callable = lambda t: -1.0 + 0.0 * t


LINEAR = Schedule()


def _col(t):
    """Scalar stays scalar; a per-row vector becomes a [B, 1] column."""
    t = np.asarray(t, dtype=np.float64)
    return t if t.ndim == 0 else t.reshape(-1, 1)


def interpolate(x0, x1, t, schedule: Schedule = LINEAR):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("t must lie in [0, 1]")
    f = schedule.f(_col(t))
    return f * x0 + (1.0 - f) * x1


def _velocity_factor(t, schedule: Schedule, floor_inclusive: bool):
    t = np.asarray(t, dtype=np.float64)
    bad = np.any(t <= T_FLOOR) if floor_inclusive else np.any(t < T_FLOOR)
    if bad:
        raise TimeSingularityError(f"velocity undefined for t below {T_FLOOR}")
    if np.any(t > 1.0):
        raise DomainError("t must not exceed 1")
    tc = _col(t)
    return schedule.df(tc) / (1.0 - schedule.f(tc))


def conditional_velocity(x0, x_t, t, schedule: Schedule = LINEAR):
    """Velocity of the path through x_t that started at x0."""
    return _velocity_factor(t, schedule, True) * (x0 - x_t)


def induced_velocity(mu, x_t, t, schedule: Schedule = LINEAR):
    """Velocity implied by a posterior-mean estimate ``mu`` of the source endpoint."""
    return _velocity_factor(t, schedule, False) * (mu - x_t)


def mu_from_velocity(x1, v, schedule: Schedule = LINEAR):
    """Invert the endpoint velocity back to the posterior mean at t = 1."""
    return x1 + v / float(schedule.df(1.0))


@dataclass
class CouplingBatch:
    x0: Tensor
    x1: Tensor
    t: np.ndarray
    x_t: Tensor


def encoder_coupling_batch(model, x1, rng: np.random.Generator, xi=None) -> CouplingBatch:
    """Draw (x0, x_t) from the encoder-induced coupling for a data batch.

    The latent part of x0 is a reparameterized encoder sample held behind a
    stop-gradient; the exogenous part is fresh standard normal noise.
    """
    x1 = ad.as_tensor(x1)
    B, D = x1.shape
    if D != model.D:
        raise DomainError(f"data extent {D} does not match model D={model.D}")
    mu_z, sigma_z, _ = endpoint_encode(model.net, x1)
    if xi is None:
        xi = rng.standard_normal((B, model.d_z))
    z = ad.stop_gradient(reparam_sample(mu_z, sigma_z, None, xi=xi))
    eps = Tensor(rng.standard_normal((B, model.d_eps)))
    t = rng.random(B)
    x0 = ad.concat([z, eps], axis=1)
    x_t = interpolate(x0, x1, t)
    return CouplingBatch(x0=x0, x1=x1, t=t, x_t=x_t)
