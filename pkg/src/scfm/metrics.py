"""Clustering, disentanglement, Frechet-distance and probing metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateRepresentationError, DomainError

FACTORVAE_STD_FLOOR = 1e-12
RIDGE_LAMBDA = 1e-3


def _labels_pair(labels, clusters) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(np.int64).ravel()
    c = np.asarray(clusters).astype(np.int64).ravel()
    if y.size != c.size:
        raise DomainError(f"length mismatch: {y.size} labels vs {c.size} clusters")
    if y.size == 0:
        raise DomainError("empty input")
    if y.min() < 0 or c.min() < 0:
        raise DomainError("ids must be non-negative")
    return y, c


def confusion_matrix(labels, clusters) -> np.ndarray:
    """Counts with rows = cluster id, columns = label id, square in max(ids) + 1."""
    y, c = _labels_pair(labels, clusters)
    n = int(max(y.max(), c.max())) + 1
    m = np.zeros((n, n), dtype=np.int64)
    np.add.at(m, (c, y), 1)
    return m


def hungarian_acc(labels, clusters) -> tuple[float, dict[int, int]]:
    """Best accuracy over one-to-one cluster-to-label maps, and that map."""
    m = confusion_matrix(labels, clusters)
    rows, cols = linear_sum_assignment(m, maximize=True)
    acc = m[rows, cols].sum() / m.sum()
    return float(acc), {int(r): int(c) for r, c in zip(rows, cols)}


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels, clusters) -> float:
    """2 I(Y; C) / (H(Y) + H(C)), natural logs."""
    y, c = _labels_pair(labels, clusters)
    _, yi = np.unique(y, return_inverse=True)
    _, ci = np.unique(c, return_inverse=True)
    joint = np.zeros((yi.max() + 1, ci.max() + 1))
    np.add.at(joint, (yi, ci), 1.0)
    hy = _entropy(joint.sum(axis=1))
    hc = _entropy(joint.sum(axis=0))
    if hy + hc == 0.0:
        return 1.0 if np.array_equal(yi, ci) else 0.0
    n = joint.sum()
    pj = joint / n
    outer = np.outer(pj.sum(axis=1), pj.sum(axis=0))
    mask = pj > 0
    mi = float((pj[mask] * np.log(pj[mask] / outer[mask])).sum())
    return float(min(1.0, max(0.0, 2.0 * mi / (hy + hc))))


# ---------------------------------------------------------------------------
# disentanglement


def factorvae_score(representation: Callable[[np.ndarray], np.ndarray], dataset,
                    n_votes: int = 500, batch: int = 64, rng: np.random.Generator | None = None,
                    held_out: float = 0.2, return_info: bool = False):
    """Majority-vote accuracy from least-varying normalized coordinate to fixed factor."""
    if rng is None:
        rng = np.random.default_rng(0)
    cards = np.asarray(dataset.cardinalities)
    grid = dataset.all_factors
    reps = np.asarray(representation(dataset.render(grid)), dtype=np.float64)
    std = reps.std(axis=0)
    active = std > FACTORVAE_STD_FLOOR
    if not active.any():
        raise DegenerateRepresentationError("every representation coordinate is constant")
    n_factors = len(cards)
    votes = np.empty((n_votes, 2), dtype=np.int64)
    for i in range(n_votes):
        k = int(rng.integers(n_factors))
        tuples = np.stack([rng.integers(c, size=batch) for c in cards], axis=1)
        tuples[:, k] = rng.integers(cards[k])
        r = np.asarray(representation(dataset.render(tuples)), dtype=np.float64)
        var = (r[:, active] / std[active]).var(axis=0)
        votes[i] = (np.flatnonzero(active)[np.argmin(var)], k)
    n_test = max(1, int(round(held_out * n_votes)))
    train, test = votes[: n_votes - n_test], votes[n_votes - n_test:]
    L = reps.shape[1]
    table = np.zeros((L, n_factors), dtype=np.int64)
    np.add.at(table, (train[:, 0], train[:, 1]), 1)
    assign = table.argmax(axis=1)
    score = float(np.mean(assign[test[:, 0]] == test[:, 1]))
    if return_info:
        return score, {"excluded_coordinates": int((~active).sum()),
                       "std_floor": FACTORVAE_STD_FLOOR}
    return score


@dataclass(frozen=True)
class ImportanceMatrix:
    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim != 2:
            raise DomainError("importance matrix must be 2-D")
        if np.any(R < 0):
            raise DomainError("importance entries must be non-negative")
        if not np.allclose(R.sum(axis=0), 1.0, rtol=0.0, atol=1e-9):
            raise DomainError("importance columns must sum to 1")
        object.__setattr__(self, "R", R)


def dci_disentanglement(R: ImportanceMatrix | np.ndarray) -> float:
    R = R.R if isinstance(R, ImportanceMatrix) else ImportanceMatrix(R).R
    L, K = R.shape
    if K < 2:
        raise DomainError("disentanglement needs at least 2 factors")
    row = R.sum(axis=1)
    rho = row / K
    score = 0.0
    for i in range(L):
        if row[i] <= 0:
            continue
        p = R[i] / row[i]
        p = p[p > 0]
        h = float(-(p * np.log(p)).sum() / math.log(K))
        score += rho[i] * (1.0 - h)
    return float(score)


def importance_from_linear(latents, factors, lam: float = RIDGE_LAMBDA) -> ImportanceMatrix:
    """Column-normalized |ridge weights| of each factor on standardized latents."""
    Z = np.asarray(latents, dtype=np.float64)
    F = np.asarray(factors, dtype=np.float64)
    if Z.ndim != 2 or F.ndim != 2 or Z.shape[0] != F.shape[0]:
        raise DomainError("latents and factors must be [N, L] and [N, K]")
    N, L = Z.shape
    if N <= L:
        raise DomainError("need more samples than latent coordinates")
    fstd = F.std(axis=0)
    if np.any(fstd == 0):
        raise DomainError("constant factor column")
    zstd = Z.std(axis=0)
    Zs = (Z - Z.mean(axis=0)) / np.where(zstd > 0, zstd, 1.0)
    Fs = (F - F.mean(axis=0)) / fstd
    W = np.linalg.solve(Zs.T @ Zs + lam * np.eye(L), Zs.T @ Fs)
    A = np.abs(W)
    col = A.sum(axis=0)
    A = np.where(col > 0, A / np.where(col > 0, col, 1.0), 1.0 / L)
    return ImportanceMatrix(A)


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, x) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise DomainError("need an [N, d] sample with N >= 2")
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(c)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    ca, cb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    for c in (ca, cb):
        if np.max(np.abs(c - c.T)) > 1e-9:
            raise DomainError("covariance is not symmetric")
    ca, cb = 0.5 * (ca + ca.T), 0.5 * (cb + cb.T)
    sa = _psd_sqrt(ca)
    m = sa @ cb @ sa
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = np.asarray(a.mean) - np.asarray(b.mean)
    fd = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# probes


def _topk(scores: np.ndarray, y: np.ndarray, k: int) -> float:
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean((order == y[:, None]).any(axis=1)))


def _cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    lse = ad.logsumexp(logits, axis=1)
    picked = (logits * onehot).sum(axis=1)
    return (lse - picked).mean()


def probe_train_eval(latents_train, labels_train, latents_test, labels_test,
                     kind: str = "linear", k_list: Sequence[int] = (1,), seed: int = 0,
                     steps: int = 500, lr: float = 0.05, hidden: int = 64) -> dict[int, float]:
    """Fit a probe on frozen latents; return Top-k test accuracy for each k."""
    from .objectives import AdamState, adam_step

    Xtr = np.asarray(latents_train, dtype=np.float64)
    Xte = np.asarray(latents_test, dtype=np.float64)
    ytr_raw = np.asarray(labels_train).ravel()
    yte_raw = np.asarray(labels_test).ravel()
    if np.unique(ytr_raw).size < 2:
        raise DomainError("probe training set needs at least two classes")
    classes = np.unique(np.concatenate([ytr_raw, yte_raw]))
    C = classes.size
    ytr = np.searchsorted(classes, ytr_raw)
    yte = np.searchsorted(classes, yte_raw)
    for k in k_list:
        if not 1 <= k <= C:
            raise DomainError(f"k={k} outside [1, {C}]")
    mean, std = Xtr.mean(axis=0), Xtr.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xtr, Xte = (Xtr - mean) / std, (Xte - mean) / std
    d = Xtr.shape[1]
    rng = np.random.default_rng(seed)
    if kind == "linear":
        params = {"W": rng.normal(0.0, 0.01, (d, C)), "b": np.zeros(C)}
    elif kind == "mlp":
        params = {"W0": rng.uniform(-1, 1, (d, hidden)) / math.sqrt(d), "b0": np.zeros(hidden),
                  "W": rng.uniform(-1, 1, (hidden, C)) / math.sqrt(hidden), "b": np.zeros(C)}
    else:
        raise DomainError(f"unknown probe kind {kind!r}")

    def forward(p: dict[str, Tensor], x) -> Tensor:
        h = ad.as_tensor(x)
        if "W0" in p:
            h = ad.tanh(h @ p["W0"] + p["b0"])
        return h @ p["W"] + p["b"]

    onehot = np.eye(C)[ytr]
    state = AdamState.zeros_like(params)
    for _ in range(steps):
        tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        loss = _cross_entropy(forward(tp, Xtr), onehot)
        grads = ad.eval_and_grad(loss, tp.values())
        params, state = adam_step(params, {k: grads[t].data for k, t in tp.items()}, state, lr)
    with ad.no_grad():
        scores = forward({k: Tensor(v) for k, v in params.items()}, Xte).data
    return {int(k): _topk(scores, yte, int(k)) for k in k_list}
