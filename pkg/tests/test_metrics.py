import itertools
import math

import numpy as np
import pytest

from scfm.data import gen_factors_lite
from scfm.errors import DegenerateRepresentationError, DomainError
from scfm.metrics import (GaussianStats, ImportanceMatrix, confusion_matrix, dci_disentanglement,
                          factorvae_score, frechet_distance, hungarian_acc,
                          importance_from_linear, nmi, probe_train_eval)


def brute_force_acc(labels, clusters):
    m = confusion_matrix(labels, clusters)
    n = m.shape[0]
    return max(sum(m[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / m.sum()


def test_hungarian_examples():
    assert hungarian_acc([0, 0, 1, 1], [1, 1, 0, 0])[0] == 1.0
    assert hungarian_acc([0, 0, 1, 1], [0, 1, 0, 1])[0] == 0.5
    with pytest.raises(DomainError):
        hungarian_acc([], [])


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(2, 8))
        n = int(rng.integers(5, 60))
        y, c = rng.integers(K, size=n), rng.integers(K, size=n)
        assert hungarian_acc(y, c)[0] == brute_force_acc(y, c)


def test_nmi_examples():
    assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0
    # hand evaluation for clusters [0,0,0,1]
    hy = math.log(2)
    hc = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    mi = 0.5 * math.log(0.5 / (0.5 * 0.75)) + 0.25 * math.log(0.25 / (0.5 * 0.75)) \
        + 0.25 * math.log(0.25 / (0.5 * 0.25))
    assert nmi([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(2 * mi / (hy + hc), abs=1e-14)
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0
    with pytest.raises(DomainError):
        nmi([0, 1], [0])


def test_nmi_symmetric_and_relabel_invariant():
    rng = np.random.default_rng(1)
    y, c = rng.integers(4, size=200), rng.integers(3, size=200)
    assert nmi(y, c) == pytest.approx(nmi(c, y), abs=1e-14)
    perm = np.array([2, 0, 1])
    assert nmi(y, perm[c]) == pytest.approx(nmi(y, c), abs=1e-14)


def test_dci_examples():
    assert dci_disentanglement(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    assert dci_disentanglement(np.full((4, 3), 0.25)) == pytest.approx(0.0, abs=1e-12)
    assert dci_disentanglement(np.array([[0.8, 0.2], [0.2, 0.8]])) == pytest.approx(0.27807, abs=1e-5)
    with pytest.raises(DomainError):
        dci_disentanglement(np.ones((3, 1)) / 3)


def test_dci_zero_row_and_invariants():
    R = np.array([[0.6, 0.0, 0.3], [0.0, 0.0, 0.0], [0.4, 1.0, 0.7]])
    v = dci_disentanglement(R)
    assert 0.0 <= v <= 1.0
    rp, cp = [2, 0, 1], [1, 2, 0]
    assert dci_disentanglement(R[rp][:, cp]) == pytest.approx(v, abs=1e-12)


def test_importance_matrix_validation():
    with pytest.raises(DomainError):
        ImportanceMatrix(np.array([[0.5, 0.5], [0.4, 0.5]]))
    with pytest.raises(DomainError):
        ImportanceMatrix(np.array([[1.5, 0.0], [-0.5, 1.0]]))


def test_importance_identity():
    F = np.random.default_rng(0).standard_normal((500, 3))
    R = importance_from_linear(F, F)
    np.testing.assert_allclose(R.R, np.eye(3), atol=1e-6)
    assert dci_disentanglement(R) == pytest.approx(1.0, abs=1e-5)


def test_importance_random_and_duplicates():
    rng = np.random.default_rng(1)
    Z, F = rng.standard_normal((300, 3)), rng.standard_normal((300, 2))
    assert 0.0 <= dci_disentanglement(importance_from_linear(Z, F)) <= 1.0
    base = rng.standard_normal((300, 2))
    Zd = np.concatenate([base, base[:, :1]], axis=1)
    R = importance_from_linear(Zd, base).R
    assert abs(R[0, 0] - R[2, 0]) <= 1e-6
    with pytest.raises(DomainError):
        importance_from_linear(Z, np.ones((300, 1)))


def test_frechet_examples():
    a = GaussianStats(np.zeros(2), np.eye(2))
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)
    b = GaussianStats(np.array([1.0, 0.0]), np.eye(2))
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-9)
    c = GaussianStats(np.zeros(1), np.array([[4.0]]))
    d = GaussianStats(np.zeros(1), np.array([[1.0]]))
    assert frechet_distance(c, d) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        frechet_distance(GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]])), a)


def test_frechet_symmetry_and_equal_covariance():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 3))
    a = GaussianStats(rng.standard_normal(3), A @ A.T)
    b = GaussianStats(rng.standard_normal(3), B @ B.T)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-9)
    b2 = GaussianStats(b.mean, a.cov)
    assert frechet_distance(a, b2) == pytest.approx(float(((a.mean - b.mean) ** 2).sum()), abs=1e-9)


@pytest.fixture(scope="module")
def factors():
    return gen_factors_lite(0)


def test_factorvae_true_factors(factors):
    assert factorvae_score(factors.lookup_factors, factors, rng=np.random.default_rng(0)) == 1.0


def test_factorvae_permuted_and_rescaled(factors):
    perm = lambda x: factors.lookup_factors(x)[:, [2, 0, 1]]
    assert factorvae_score(perm, factors, rng=np.random.default_rng(1)) == 1.0
    scaled = lambda x: factors.lookup_factors(x) * np.array([3.0, 0.1, 7.0]) + np.array([1.0, -2.0, 5.0])
    assert factorvae_score(scaled, factors, rng=np.random.default_rng(2)) == 1.0


def test_factorvae_noise_is_chance(factors):
    noise_rng = np.random.default_rng(3)
    rep = lambda x: noise_rng.standard_normal((len(x), 3))
    n_votes = 2000
    score = factorvae_score(rep, factors, n_votes=n_votes, rng=np.random.default_rng(4))
    n_test = int(round(0.2 * n_votes))
    assert abs(score - 1 / 3) <= 4 * math.sqrt((1 / 3) * (2 / 3) / n_test)


def test_factorvae_constant_raises(factors):
    with pytest.raises(DegenerateRepresentationError):
        factorvae_score(lambda x: np.zeros((len(x), 2)), factors)


def test_factorvae_excludes_collapsed_coordinates(factors):
    rep = lambda x: np.concatenate([factors.lookup_factors(x), np.zeros((len(x), 1))], axis=1)
    score, info = factorvae_score(rep, factors, rng=np.random.default_rng(5), return_info=True)
    assert score == 1.0 and info["excluded_coordinates"] == 1


def test_probe_separable():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    idx = rng.permutation(200)
    tr, te = idx[:150], idx[150:]
    for kind in ("linear", "mlp"):
        acc = probe_train_eval(x[tr], y[tr], x[te], y[te], kind, [1, 2], seed=0)
        assert acc[1] == 1.0 and acc[2] == 1.0


def test_probe_determinism_and_errors():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((60, 3)), rng.integers(3, size=60)
    a = probe_train_eval(x[:40], y[:40], x[40:], y[40:], "mlp", [1, 3], seed=4)
    b = probe_train_eval(x[:40], y[:40], x[40:], y[40:], "mlp", [1, 3], seed=4)
    assert a == b and a[3] == 1.0
    with pytest.raises(DomainError):
        probe_train_eval(x, np.zeros(60), x, np.zeros(60), "linear", [1])
    with pytest.raises(DomainError):
        probe_train_eval(x, y, x, y, "linear", [4])
