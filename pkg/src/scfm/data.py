"""Synthetic datasets with known labels or generative factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, DomainError
from .rng import substream

INJECTIVE_MIN_DIST = 1e-6
MAX_CONSTRUCTION_ATTEMPTS = 8


def gmm2d_centers(k: int, separation: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / k
    return separation * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_gmm2d(k: int, separation: float, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``k`` unit-variance blobs on a circle of radius ``separation``; balanced labels."""
    if k < 1:
        raise DomainError("k must be >= 1")
    if n < 0:
        raise DomainError("n must be >= 0")
    rng = substream(seed, "gmm2d")
    labels = rng.permutation(np.arange(n) % k)
    points = gmm2d_centers(k, separation)[labels] + rng.standard_normal((n, 2))
    return points, labels.astype(np.int64)


@dataclass(frozen=True)
class FactorDataset:
    factor_names: tuple[str, ...]
    cardinalities: tuple[int, ...]
    lift: np.ndarray      # [n_factors, D] full-rank linear map
    offset: np.ndarray    # [D]
    rotation: np.ndarray  # [D, D] orthogonal

    @property
    def all_factors(self) -> np.ndarray:
        axes = [np.arange(c) for c in self.cardinalities]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))

    @property
    def D(self) -> int:
        return self.rotation.shape[0]

    def normalize(self, tuples) -> np.ndarray:
        t = np.asarray(tuples, dtype=np.float64)
        return t / np.maximum(np.asarray(self.cardinalities, dtype=np.float64) - 1.0, 1.0)

    def render(self, tuples) -> np.ndarray:
        """Observation for each factor tuple: rotate(sin(lift(normalized tuple)))."""
        return np.sin(self.normalize(tuples) @ self.lift + self.offset) @ self.rotation

    def lookup_factors(self, obs) -> np.ndarray:
        """Grid tuple whose rendering is nearest to each observation."""
        grid = self.all_factors
        rendered = self.render(grid)
        obs = np.asarray(obs, dtype=np.float64)
        d2 = ((obs[:, None, :] - rendered[None, :, :]) ** 2).sum(axis=2)
        return grid[np.argmin(d2, axis=1)]

    def min_pairwise_distance(self) -> float:
        r = self.render(self.all_factors)
        d2 = ((r[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(d2.min()))


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_factors_lite(seed: int, cardinalities=(10, 5, 3), D: int = 16) -> FactorDataset:
    """Three discrete factors rendered nonlinearly into R^D; injectivity is verified."""
    names = tuple(f"factor{i}" for i in range(len(cardinalities)))
    for attempt in range(MAX_CONSTRUCTION_ATTEMPTS):
        rng = substream(seed, "factors-lite", attempt)
        lift = rng.normal(0.0, 1.5, (len(cardinalities), D))
        offset = rng.uniform(-np.pi, np.pi, D)
        ds = FactorDataset(names, tuple(int(c) for c in cardinalities), lift, offset,
                           _orthogonal(rng, D))
        if (np.linalg.matrix_rank(lift) == len(cardinalities)
                and ds.min_pairwise_distance() > INJECTIVE_MIN_DIST):
            return ds
    raise ConstructionError("could not build an injective rendering")
