import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from metric_ensemble.base_metrics import (KernelSpec, _all_cross_moment, chi2_kernel, clip_spectrum, fit_kissme,
                                          fit_klfda, fit_pca, kernel_matrix, kissme_from_differences,
                                          klfda_scatter, select_sigma2)
from metric_ensemble.errors import InvalidInputError, NumericalError
from metric_ensemble.types import DescriptorSet

S2, S8 = np.sqrt(2.0), np.sqrt(8.0)
# second moments exactly diag(1, 4) and diag(4, 1)
SIMILAR = np.array([[S2, 0], [-S2, 0], [0, S8], [0, -S8]])
DISSIMILAR = np.array([[S8, 0], [-S8, 0], [0, S2], [0, -S2]])


def test_kissme_diagonal_toy():
    model = kissme_from_differences(SIMILAR, DISSIMILAR, ridge=0.0)
    np.testing.assert_allclose(model.sigma_S, np.diag([1.0, 4.0]), atol=1e-14)
    np.testing.assert_allclose(model.M_raw, np.diag([0.75, -0.75]), atol=1e-14)
    np.testing.assert_allclose(model.M, np.diag([0.75, 0.0]), atol=1e-14)
    assert model.distance([0, 0], [2, 3]) == pytest.approx(3.0, abs=1e-12)


def _kissme_oracle(sim, dis, ridge):
    d = sim.shape[1]
    SS = sim.T @ sim / len(sim) + ridge * np.eye(d)
    SD = dis.T @ dis / len(dis) + ridge * np.eye(d)
    raw = np.linalg.solve(SS, np.eye(d)) - np.linalg.solve(SD, np.eye(d))
    vals, vecs = scipy.linalg.eigh((raw + raw.T) / 2)
    return vecs @ np.diag(np.maximum(vals, 0)) @ vecs.T


def test_kissme_matches_direct_formula(rng):
    for _ in range(5):
        sim = rng.standard_normal((40, 5)) * 0.5
        dis = rng.standard_normal((200, 5)) * 1.5
        model = kissme_from_differences(sim, dis, ridge=1e-3)
        np.testing.assert_allclose(model.M, _kissme_oracle(sim, dis, 1e-3), atol=1e-8)


def test_default_ridge_is_relative_to_trace(rng):
    sim = rng.standard_normal((50, 4))
    model = kissme_from_differences(sim, 3 * sim)
    S = sim.T @ sim / 50
    np.testing.assert_allclose(model.sigma_S, S + 1e-6 * np.trace(S) / 4 * np.eye(4), rtol=1e-12)


def test_singular_covariance_names_matrix():
    sim = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(NumericalError, match="sigma_S"):
        kissme_from_differences(sim, DISSIMILAR, ridge=0.0)


def test_all_cross_moment_matches_loop(rng):
    A, B = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    diffs = np.array([A[i] - B[j] for i in range(6) for j in range(6) if i != j])
    np.testing.assert_allclose(_all_cross_moment(A, B), diffs.T @ diffs / len(diffs), rtol=1e-12)


def test_fit_kissme_caps_pca_at_half_the_pairs(rng):
    ids = tuple(f"p{i}" for i in range(12))
    a = DescriptorSet("f", "a", ids, rng.standard_normal((12, 20)))
    b = DescriptorSet("f", "b", ids, a.descriptors + 0.1 * rng.standard_normal((12, 20)))
    model = fit_kissme(a, b, pca_dim=64)
    assert model.pca.dim == 6 and model.M.shape == (6, 6)
    assert np.linalg.eigvalsh(model.M).min() >= -1e-10


@given(st.integers(0, 10_000))
def test_kissme_distances_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    model = kissme_from_differences(rng.standard_normal((30, 4)), rng.standard_normal((60, 4)) * 2)
    X = rng.standard_normal((8, 4))
    D = model.pairwise(X, X)
    assert D.min() >= -1e-10
    np.testing.assert_allclose(D, D.T, atol=1e-10)


def test_clip_spectrum_zeroes_only_negatives():
    M, vals, _ = clip_spectrum(np.diag([2.0, -1.0, 0.5]))
    np.testing.assert_allclose(M, np.diag([2.0, 0.0, 0.5]), atol=1e-15)
    np.testing.assert_allclose(np.sort(vals), [0.0, 0.5, 2.0])


def test_chi2_kernel_value():
    # chi2((1), (3)) = (1 - 3)^2 / (1 + 3) = 1
    assert chi2_kernel([1.0], [3.0], 1.0) == pytest.approx(np.exp(-1.0), abs=1e-12)
    assert chi2_kernel([0.2, 0.8], [0.2, 0.8], 0.5) == 1.0


def test_select_sigma2_first_quartile():
    # squared distances {1, 4, 9}; 0.25 quantile by linear interpolation: 1 + 0.5 * 3
    assert select_sigma2(np.array([[0.0], [1.0], [3.0]]), "rbf") == pytest.approx(2.5)


def test_select_sigma2_zero_quartile_falls_back():
    X = np.array([[0.0], [0.0], [0.0], [1.0]])
    assert select_sigma2(X, "rbf") == 1.0
    with pytest.raises(NumericalError):
        select_sigma2(np.zeros((3, 2)), "rbf")


def test_kernel_spec_validation():
    with pytest.raises(InvalidInputError):
        KernelSpec("poly")
    with pytest.raises(InvalidInputError):
        KernelSpec("rbf", -1.0)
    with pytest.raises(InvalidInputError):
        kernel_matrix(KernelSpec("rbf"), np.zeros((2, 2)))


def test_pca_matches_covariance_spectrum(rng):
    X = rng.standard_normal((50, 6)) @ rng.standard_normal((6, 6))
    pca = fit_pca(X, 3)
    evals = np.linalg.eigvalsh(np.cov(X.T))[::-1][:3]
    np.testing.assert_allclose(pca.explained_variance, evals, rtol=1e-10)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(3), atol=1e-12)
    full = fit_pca(X, 6)
    np.testing.assert_allclose(full.inverse_transform(full.transform(X)), X, atol=1e-10)


# --------------------------------------------------------------------------- kLFDA

def _scatter_oracle(K, labels, knn):
    """Explicit pair loops: S = 1/2 sum_ij W_ij (k_i - k_j)(k_i - k_j)^T."""
    n = len(labels)
    d = np.array([[K[i, i] + K[j, j] - 2 * K[i, j] for j in range(n)] for i in range(n)])
    scale = np.zeros(n)
    for i in range(n):
        same = sorted(d[i, j] for j in range(n) if labels[j] == labels[i])
        scale[i] = np.sqrt(same[min(knn, len(same) - 1)])
    Sb, Sw = np.zeros((n, n)), np.zeros((n, n))
    for i in range(n):
        nc = sum(lab == labels[i] for lab in labels)
        for j in range(n):
            diff = np.outer(K[:, i] - K[:, j], K[:, i] - K[:, j])
            if labels[i] == labels[j]:
                a = np.exp(-d[i, j] / (scale[i] * scale[j]))
                Sw += 0.5 * a / nc * diff
                Sb += 0.5 * a * (1 / n - 1 / nc) * diff
            else:
                Sb += 0.5 / n * diff
    return Sb, Sw


def _toy_classes(rng, classes=4, per=3, dim=5):
    centers = rng.random((classes, dim)) * 3
    X = np.repeat(centers, per, axis=0) + 0.3 * rng.random((classes * per, dim))
    labels = np.repeat([f"c{c}" for c in range(classes)], per)
    return X, labels


def test_klfda_scatter_matches_pair_loops(rng):
    X, labels = _toy_classes(rng)
    K = kernel_matrix(KernelSpec("rbf-chi2").resolve(X), X)
    Sb, Sw = klfda_scatter(K, labels, knn=7)
    Sb_ref, Sw_ref = _scatter_oracle(K, list(labels), 7)
    np.testing.assert_allclose(Sb, Sb_ref, atol=1e-12)
    np.testing.assert_allclose(Sw, Sw_ref, atol=1e-12)


def test_klfda_solves_generalized_eigenproblem(rng):
    X, labels = _toy_classes(rng)
    kernel = KernelSpec("rbf-chi2").resolve(X)
    model = fit_klfda(X, labels, kernel, beta=0.01, r=3)
    K = kernel_matrix(kernel, X)
    Sb, Sw = _scatter_oracle(K, list(labels), 7)
    Sw = Sw + 0.01 * np.eye(len(X))
    ref = np.sort(scipy.linalg.eig(Sb, Sw, right=False).real)[::-1][:3]
    np.testing.assert_allclose(model.eigenvalues, ref, rtol=1e-8)
    for v, lam in zip(model.alpha.T, model.eigenvalues):
        np.testing.assert_allclose(Sb @ v, lam * (Sw @ v), atol=1e-8 * max(1.0, abs(lam)))
        assert v[np.argmax(np.abs(v))] > 0


def test_klfda_distance_is_projection_distance(rng):
    X, labels = _toy_classes(rng)
    model = fit_klfda(X, labels, r=2)
    P = model.project(X[:3])
    assert model.distance(X[0], X[2]) == pytest.approx(float(np.sum((P[0] - P[2]) ** 2)), rel=1e-10)


def test_klfda_linear_kernel_uses_precomputed_map(rng):
    X, labels = _toy_classes(rng)
    model = fit_klfda(X, labels, KernelSpec("linear"), r=2)
    np.testing.assert_allclose(model.project(X), (X @ X.T) @ model.alpha, atol=1e-10)


def test_klfda_rejects_singleton_class(rng):
    X = rng.random((5, 3))
    with pytest.raises(InvalidInputError, match="'solo'"):
        fit_klfda(X, ["a", "a", "b", "b", "solo"])
