"""Closed-form checks of the posterior-velocity identities on tractable couplings.

A :class:`MixtureCoupling` has a finite data law (atoms a_j with weights
p_j) and a Gaussian source law per atom, x0 | x1 = a_j ~ N(m_j, diag s_j^2).
Because the interpolant is deterministic, x0 is recovered exactly from
(x_t, x1), so the posterior over x0 given x_t is a finite mixture of point
masses with closed-form weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EstimatorDegenerateError, VerificationError
from .interpolant import conditional_velocity, induced_velocity, interpolate
from .rng import substream

DEFAULT_BANDWIDTH = 0.05
MIN_ESS = 50.0


@dataclass(frozen=True)
class MixtureCoupling:
    atoms: np.ndarray   # [J, D]
    probs: np.ndarray   # [J]
    means: np.ndarray   # [J, D]
    scales: np.ndarray  # [J, D]

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        J, D = atoms.shape
        probs = np.asarray(self.probs, dtype=np.float64).reshape(J)
        means = np.asarray(self.means, dtype=np.float64).reshape(J, D)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(J, D)
        if np.any(probs <= 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError("atom probabilities must be positive and sum to 1")
        if np.any(scales <= 0):
            raise DomainError("source scales must be positive")
        for name, v in (("atoms", atoms), ("probs", probs), ("means", means), ("scales", scales)):
            object.__setattr__(self, name, v)

    @property
    def D(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def symmetric_1d(cls) -> "MixtureCoupling":
        """Atoms at +-1 with equal mass and a standard normal source for both."""
        return cls(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]),
                   np.zeros((2, 1)), np.ones((2, 1)))


def _check_open_time(t: float):
    if not 0.0 < t < 1.0:
        raise DomainError("t must lie in (0, 1)")


def posterior_components(c: MixtureCoupling, x_t, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior atom weights w_j and the source point x0_j each atom implies."""
    _check_open_time(t)
    x_t = np.asarray(x_t, dtype=np.float64).reshape(c.D)
    f = 1.0 - t
    loc = f * c.means + (1.0 - f) * c.atoms
    sd = f * c.scales
    log_w = (np.log(c.probs)
             - 0.5 * (((x_t - loc) / sd) ** 2).sum(axis=1)
             - np.log(sd).sum(axis=1))
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    x0 = (x_t - (1.0 - f) * c.atoms) / f
    return w, x0


def exact_posterior_mean(c: MixtureCoupling, x_t, t: float) -> np.ndarray:
    w, x0 = posterior_components(c, x_t, t)
    return w @ x0


@dataclass
class McEstimate:
    mean: np.ndarray
    se: np.ndarray
    ess: float


def mc_posterior_mean(c: MixtureCoupling, x_t, t: float, n: int, bandwidth: float,
                      rng: np.random.Generator) -> McEstimate:
    """Kernel-weighted importance estimate of E[x0 | x_t] from coupling draws."""
    if n < 10_000:
        raise DomainError("n must be at least 1e4")
    if bandwidth <= 0:
        raise DomainError("bandwidth must be positive")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(c.D)
    j = rng.choice(len(c.probs), size=n, p=c.probs)
    x0 = c.means[j] + c.scales[j] * rng.standard_normal((n, c.D))
    xs = interpolate(x0, c.atoms[j], t)
    log_k = -0.5 * (((xs - x_t) / bandwidth) ** 2).sum(axis=1)
    w = np.exp(log_k - log_k.max())
    sw = w.sum()
    ess = float(sw**2 / (w**2).sum())
    if not np.isfinite(ess) or ess < MIN_ESS:
        raise EstimatorDegenerateError(f"effective sample size {ess:.1f} below {MIN_ESS}")
    mean = (w @ x0) / sw
    se = np.sqrt((w**2) @ ((x0 - mean) ** 2)) / sw
    return McEstimate(mean, se, ess)


# ---------------------------------------------------------------------------
# checks; each returns a JSON-ready report and raises VerificationError on failure


def loss_equivalence_check(n_cases: int, rng: np.random.Generator, tol: float = 1e-10) -> dict:
    """Time-weighted velocity regression equals posterior-mean regression, per sample."""
    worst = 0.0
    failures = []
    for i in range(n_cases):
        D = int(rng.integers(1, 5))
        x0, x1, mu = (rng.standard_normal(D) for _ in range(3))
        t = float(rng.uniform(0.05, 0.99))
        f, df = 1.0 - t, -1.0
        x_t = interpolate(x0, x1, t)
        v_phi = induced_velocity(mu, x_t, t)
        v_cond = conditional_velocity(x0, x_t, t)
        lhs = ((1.0 - f) / df) ** 2 * float(np.sum((v_phi - v_cond) ** 2))
        rhs = float(np.sum((mu - x0) ** 2))
        err = abs(lhs - rhs)
        worst = max(worst, err)
        if err > tol:
            failures.append({"case": i, "t": t, "lhs": lhs, "rhs": rhs})
    if failures:
        raise VerificationError(f"velocity/mean regression mismatch: {failures[:5]}")

    # the expected Gaussian NLL over the exact posterior is minimized at the posterior mean
    c = MixtureCoupling.symmetric_1d()
    w, x0s = posterior_components(c, [0.25], 0.5)
    grid = np.arange(-2.0, 2.0 + 1e-12, 1e-3)
    nll = (w[None, :] * 0.5 * (grid[:, None] - x0s[None, :, 0]) ** 2).sum(axis=1)
    best = float(grid[np.argmin(nll)])
    exact = float(exact_posterior_mean(c, [0.25], 0.5)[0])
    if abs(best - exact) > 1e-3:
        raise VerificationError(f"grid minimizer {best} is not the posterior mean {exact}")
    return {"n_cases": n_cases, "max_abs_residual": worst,
            "grid_minimizer": best, "posterior_mean": exact}


def gaussian_kl(mu_a, cov_a, mu_b, cov_b) -> float:
    """KL(N(mu_a, cov_a) || N(mu_b, cov_b)) for full covariances."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    d = mu_a.size
    inv_b = np.linalg.inv(cov_b)
    diff = mu_b - mu_a
    _, ld_a = np.linalg.slogdet(cov_a)
    _, ld_b = np.linalg.slogdet(cov_b)
    return 0.5 * float(np.trace(inv_b @ cov_a) + diff @ inv_b @ diff - d + ld_b - ld_a)


def kl_decomposition_and_bound_check(rng: np.random.Generator | None = None,
                                     n_random: int = 50, tol: float = 1e-10) -> dict:
    """Endpoint KL split and the aggregate-vs-joint KL bound."""
    rng = rng or substream(0, "oracle-kl")
    cases = [(np.array([0.3]), np.array([0.7]), np.array([3.0, 4.0]))]
    for _ in range(n_random):
        d_z, d_e = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cases.append((rng.standard_normal(d_z), rng.uniform(0.3, 2.0, d_z),
                      rng.standard_normal(d_e)))
    worst = 0.0
    for mu_z, s_z, mu_e in cases:
        d_z, d_e = mu_z.size, mu_e.size
        p_mu = np.linspace(-0.5, 0.5, d_z)
        p_var = np.linspace(0.8, 1.5, d_z)
        kl_z = gaussian_kl(mu_z, np.diag(s_z**2), p_mu, np.diag(p_var))
        kl_joint = gaussian_kl(np.concatenate([mu_z, mu_e]),
                               np.diag(np.concatenate([s_z**2, np.ones(d_e)])),
                               np.concatenate([p_mu, np.zeros(d_e)]),
                               np.diag(np.concatenate([p_var, np.ones(d_e)])))
        resid = abs(kl_joint - kl_z - 0.5 * float(mu_e @ mu_e))
        worst = max(worst, resid)
        if resid > tol:
            raise VerificationError(f"endpoint KL split residual {resid:.3e} for mu_eps={mu_e}")

    # 1-D linear-Gaussian model: x ~ N(0,1), q(z|x) = N(x/2, 1/2), p(z) = N(0,1), p(x|z) = N(z,1)
    agg_var = 0.25 + 0.5
    kl_agg = gaussian_kl([0.0], [[agg_var]], [0.0], [[1.0]])
    enc_joint = np.array([[1.0, 0.5], [0.5, 0.75]])  # (x, z) under data x encoder
    dec_joint = np.array([[2.0, 1.0], [1.0, 1.0]])   # (x, z) under prior x decoder
    kl_joint = gaussian_kl(np.zeros(2), enc_joint, np.zeros(2), dec_joint)
    if not kl_agg <= kl_joint:
        raise VerificationError(f"aggregate KL {kl_agg} exceeds joint KL {kl_joint}")
    return {"split_max_residual": worst, "split_cases": len(cases),
            "kl_aggregate": kl_agg, "kl_joint": kl_joint}


def posterior_mean_mc_check(seed: int = 0, n: int = 10**6,
                            bandwidth: float = DEFAULT_BANDWIDTH) -> dict:
    """Exact posterior mean against the kernel-smoothed Monte-Carlo estimate."""
    c = MixtureCoupling.symmetric_1d()
    out = {}
    for name, x_t in (("x_t=0.25", 0.25), ("x_t=0", 0.0)):
        exact = float(exact_posterior_mean(c, [x_t], 0.5)[0])
        est = mc_posterior_mean(c, [x_t], 0.5, n, bandwidth, substream(seed, "oracle-mc", int(x_t * 100)))
        z = (float(est.mean[0]) - exact) / float(est.se[0])
        out[name] = {"exact": exact, "mc": float(est.mean[0]), "se": float(est.se[0]),
                     "ess": est.ess, "z": z}
        if abs(z) > 4.0:
            raise VerificationError(f"MC posterior mean off by {z:.2f} SE at {name}")
    try:
        mc_posterior_mean(c, [0.25], 0.5, 10_000, 1e-7, substream(seed, "oracle-mc", 99))
    except EstimatorDegenerateError:
        out["degenerate_bandwidth_detected"] = True
    else:
        raise VerificationError("tiny bandwidth did not trigger the degeneracy guard")
    return out


def bandwidth_sensitivity(seed: int = 0, n: int = 10**6,
                          bandwidths=(0.025, 0.05, 0.1)) -> dict:
    """Reported only: smoothing bias grows with bandwidth."""
    c = MixtureCoupling.symmetric_1d()
    exact = float(exact_posterior_mean(c, [0.25], 0.5)[0])
    rows = {}
    for h in bandwidths:
        est = mc_posterior_mean(c, [0.25], 0.5, n, h, substream(seed, "oracle-bandwidth"))
        rows[f"{h:g}"] = {"mc": float(est.mean[0]), "se": float(est.se[0]), "ess": est.ess,
                          "z": (float(est.mean[0]) - exact) / float(est.se[0])}
    return rows


def endpoint_limit_check(t: float = 1.0 - 1e-4, tol: float = 1e-2) -> dict:
    """Near t = 1 the posterior mean on an atom's path returns that atom's source mean."""
    c = MixtureCoupling(np.array([[2.0, -1.0], [-2.0, 1.0]]), np.array([0.3, 0.7]),
                        np.array([[0.4, -0.7], [-1.0, 0.2]]), np.array([[0.5, 1.2], [1.0, 0.8]]))
    f = 1.0 - t
    x_t = f * c.means[0] + (1.0 - f) * c.atoms[0]
    w, _ = posterior_components(c, x_t, t)
    mean = exact_posterior_mean(c, x_t, t)
    err = float(np.max(np.abs(mean - c.means[0])))
    if err > tol:
        raise VerificationError(f"endpoint limit off by {err}")
    return {"t": t, "weight_atom0": float(w[0]), "max_abs_error": err}


def marginal_velocity_check(n_cases: int, rng: np.random.Generator, tol: float = 1e-10) -> dict:
    """Velocity induced by the exact posterior mean equals the weighted conditional velocities."""
    worst = 0.0
    for i in range(n_cases):
        J, D = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        p = rng.uniform(0.2, 1.0, J)
        c = MixtureCoupling(rng.standard_normal((J, D)) * 2, p / p.sum(),
                            rng.standard_normal((J, D)), rng.uniform(0.5, 1.5, (J, D)))
        t = float(rng.uniform(0.05, 0.95))
        x_t = rng.standard_normal(D)
        w, x0 = posterior_components(c, x_t, t)
        lhs = induced_velocity(w @ x0, x_t, t)
        rhs = w @ (c.atoms - x0)
        err = float(np.max(np.abs(lhs - rhs)))
        worst = max(worst, err)
        if err > tol:
            raise VerificationError(f"marginal velocity mismatch {err:.3e} in case {i}")
    return {"n_cases": n_cases, "max_abs_residual": worst}


def run_all(seed: int = 0) -> dict:
    """Run every check; ``passed`` is False if any raised VerificationError."""
    checks = {
        "loss_equivalence": lambda: loss_equivalence_check(1000, substream(seed, "oracle-equiv")),
        "kl_decomposition_and_bound": lambda: kl_decomposition_and_bound_check(
            substream(seed, "oracle-kl")),
        "posterior_mean_mc": lambda: posterior_mean_mc_check(seed),
        "endpoint_limit": endpoint_limit_check,
        "marginal_velocity": lambda: marginal_velocity_check(200, substream(seed, "oracle-vel")),
    }
    report: dict = {"checks": {}}
    ok = True
    for name, fn in checks.items():
        try:
            report["checks"][name] = {"passed": True, **fn()}
        except VerificationError as exc:
            ok = False
            report["checks"][name] = {"passed": False, "error": str(exc)}
    report["bandwidth_sensitivity"] = bandwidth_sensitivity(seed)
    report["passed"] = ok
    return report
