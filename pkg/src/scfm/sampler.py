"""ODE integration of the induced velocity field and the three sampling modes."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import DomainError, SolverStallError
from .interpolant import induced_velocity, interpolate
from .networks import decode, endpoint_encode, mean_forward
from .prior import sample as prior_sample

T_START = 1e-3
CHUNK = 4096
MIN_STEP = 1e-12

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "heun"
    steps: int = 25
    rtol: float = 1e-5
    atol: float = 1e-5
    t_start: float = T_START
    t_end: float = 1.0

    def __post_init__(self):
        if self.kind not in ("heun", "dopri5"):
            raise DomainError(f"unknown solver {self.kind!r}")
        if self.kind == "heun" and self.steps < 1:
            raise DomainError("heun needs steps >= 1")
        if self.kind == "dopri5" and (self.rtol <= 0 or self.atol <= 0):
            raise DomainError("dopri5 needs rtol, atol > 0")


@dataclass
class StepRecord:
    t: float
    h: float
    err: float
    accepted: bool


@dataclass
class SampleTrace:
    x_final: np.ndarray
    nfe: int
    accepted: int = 0
    rejected: int = 0
    flops_est: int = 0
    decoder_evals: int = 0
    steps_log: list[StepRecord] = field(default_factory=list)

    def diagnostics(self) -> dict[str, int]:
        return {"nfe": self.nfe, "accepted": self.accepted, "rejected": self.rejected,
                "flops_est": self.flops_est, "decoder_evals": self.decoder_evals}


def model_field(model) -> Field:
    """Induced velocity of the trained posterior-mean network as a numpy field."""

    def v(x: np.ndarray, t: float) -> np.ndarray:
        tt = np.full(x.shape[0], t)
        with ad.no_grad():
            mu = mean_forward(model.net, x, tt).data
        return induced_velocity(mu, x, tt)

    return v


def _heun(v: Field, x: np.ndarray, t0: float, t1: float, steps: int):
    grid = np.linspace(t0, t1, steps + 1)
    for t, t_next in zip(grid[:-1], grid[1:]):
        h = t_next - t
        k1 = v(x, t)
        k2 = v(x + h * k1, t_next)
        x = x + 0.5 * h * (k1 + k2)
    return x, 2 * steps, steps, 0, []


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dopri5(v: Field, x: np.ndarray, t0: float, t1: float, rtol: float, atol: float):
    span = t1 - t0
    t = t0
    h = min(span, 0.01 * max(span, 1e-3))
    k1 = v(x, t)
    nfe = 1
    accepted = rejected = 0
    log: list[StepRecord] = []
    while t < t1:
        h = min(h, t1 - t)
        if h < MIN_STEP:
            raise SolverStallError(f"step size {h:.3e} underflowed at t={t:.6f}")
        k = [k1]
        for s in range(1, 7):
            xs = x + h * sum(a * kj for a, kj in zip(_A[s], k))
            k.append(v(xs, min(t + _C[s] * h, t1)))
        nfe += 6
        x_new = x + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
        err_vec = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        ok = np.isfinite(err) and err <= 1.0
        log.append(StepRecord(t, h, err, bool(ok)))
        if ok:
            t = t1 if t + h >= t1 else t + h
            x = x_new
            k1 = k[6]
            accepted += 1
        else:
            rejected += 1
        if not np.isfinite(err):
            factor = 0.2
        elif err == 0.0:
            factor = 5.0
        else:
            factor = min(5.0, max(0.2, 0.9 * err ** (-0.2)))
        h = h * factor
    return x, nfe, accepted, rejected, log


def _threads() -> int:
    env = os.environ.get("SCFM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def integrate(field_or_model, x_init, t0: float, spec: SolverSpec,
              flops_per_eval: int | None = None) -> SampleTrace:
    """Integrate dx/dt = v(x, t) from max(t0, t_start) to t_end.

    Rows are processed in fixed-size chunks, so the result never depends on
    the worker count. NFE is the number of batched field evaluations per
    chunk (the maximum over chunks for the adaptive solver).
    """
    if callable(field_or_model) and not hasattr(field_or_model, "net"):
        v = field_or_model
        per_eval = flops_per_eval or 0
    else:
        v = model_field(field_or_model)
        per_eval = field_or_model.per_eval_flops() if flops_per_eval is None else flops_per_eval
    x = np.asarray(x_init.data if isinstance(x_init, ad.Tensor) else x_init, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("x_init must be finite")
    if not 0.0 <= t0 <= spec.t_end:
        raise DomainError(f"t0 must lie in [0, {spec.t_end}]")
    start = max(t0, spec.t_start)
    if start >= spec.t_end:
        return SampleTrace(x.copy(), 0, flops_est=0)

    def run(chunk):
        if spec.kind == "heun":
            return _heun(v, chunk, start, spec.t_end, spec.steps)
        return _dopri5(v, chunk, start, spec.t_end, spec.rtol, spec.atol)

    chunks = [x[i:i + CHUNK] for i in range(0, len(x), CHUNK)] or [x]
    workers = min(_threads(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    lead = max(range(len(results)), key=lambda i: results[i][1])
    _, nfe, acc, rej, log = results[lead]
    out = np.concatenate([r[0] for r in results], axis=0)
    return SampleTrace(out, nfe, acc, rej, nfe * per_eval, 0, log)


def steps_for_density(t0: float, density: float) -> int:
    """Heun step count covering [t0, 1] at ``density`` steps per unit time."""
    return max(1, math.ceil(density * (1.0 - t0) - 1e-9))


def draw_source(model, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(z, eps) with z from the GMM prior and eps standard normal."""
    if n < 1:
        raise DomainError("n must be >= 1")
    z, _ = prior_sample(model.prior, n, rng)
    eps = rng.standard_normal((n, model.d_eps))
    return z, eps


def sample_full(model, n: int, spec: SolverSpec, rng: np.random.Generator,
                source: tuple[np.ndarray, np.ndarray] | None = None) -> SampleTrace:
    z, eps = source if source is not None else draw_source(model, n, rng)
    x0 = np.concatenate([z, eps], axis=1)
    return integrate(model, x0, spec.t_start, spec)


def _decode(model, z, rng, stochastic):
    with ad.no_grad():
        return decode(model.decoder, z, rng=rng, stochastic=stochastic).data


def sample_decoder(model, n: int, rng: np.random.Generator, stochastic: bool = False,
                   source: tuple[np.ndarray, np.ndarray] | None = None) -> SampleTrace:
    z, _ = source if source is not None else draw_source(model, n, rng)
    return SampleTrace(_decode(model, z, rng, stochastic), 0, decoder_evals=1)


def sample_refined(model, n: int, t0: float, spec: SolverSpec, rng: np.random.Generator,
                   stochastic_decoder: bool = False,
                   source: tuple[np.ndarray, np.ndarray] | None = None) -> SampleTrace:
    """Decode a prior draw, move it back to time t0 along the interpolant, integrate to 1."""
    if not 0.0 <= t0 <= 1.0:
        raise DomainError("t0 must lie in [0, 1]")
    z, eps = source if source is not None else draw_source(model, n, rng)
    x_hat = _decode(model, z, rng, stochastic_decoder)
    if t0 >= 1.0:
        return SampleTrace(x_hat, 0, decoder_evals=1)
    x0 = np.concatenate([z, eps], axis=1)
    x_t0 = interpolate(x0, x_hat, t0)
    trace = integrate(model, x_t0, t0, spec)
    trace.decoder_evals = 1
    return trace


def reconstruct(model, x1, spec: SolverSpec, rng: np.random.Generator) -> SampleTrace:
    """Encode x1, pair the latent with fresh exogenous noise and integrate."""
    x1 = np.asarray(x1, dtype=np.float64)
    with ad.no_grad():
        mu, sigma, _ = endpoint_encode(model.net, x1)
    z = mu.data + sigma.data * rng.standard_normal(mu.shape)
    eps = rng.standard_normal((x1.shape[0], model.d_eps))
    return integrate(model, np.concatenate([z, eps], axis=1), spec.t_start, spec)
