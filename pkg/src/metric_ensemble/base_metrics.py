"""Per-channel base metrics: PCA, KISSME and kernel local Fisher discriminant analysis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import kernels
from .errors import InvalidInputError, NumericalError
from .types import BaseMetric, DescriptorSet

log = logging.getLogger(__name__)

KERNEL_KINDS = ("rbf-chi2", "rbf", "linear")


def _as_matrix(X):
    if isinstance(X, DescriptorSet):
        return X.descriptors
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def fix_signs(vecs):
    """Flip each column so its largest-magnitude component is positive."""
    vecs = np.array(vecs, dtype=np.float64, copy=True)
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


# --------------------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelSpec:
    """Kernel kind plus bandwidth ``sigma2``.

    ``sigma2=None`` on an RBF kind means "select from the training data" (see
    :func:`select_sigma2`); :meth:`resolve` fills it in.
    """

    kind: str = "rbf-chi2"
    sigma2: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.sigma2 is not None and self.kind != "linear" and not self.sigma2 > 0:
            raise InvalidInputError(f"sigma2 must be > 0, got {self.sigma2}")

    @property
    def resolved(self) -> bool:
        return self.kind == "linear" or self.sigma2 is not None

    def resolve(self, X) -> "KernelSpec":
        if self.resolved:
            return self
        return replace(self, sigma2=select_sigma2(X, self.kind))

    def to_dict(self):
        return {"kind": self.kind, "sigma2": self.sigma2}


def base_distances(X, Y, kind: str) -> np.ndarray:
    """Distances the RBF kinds exponentiate: chi-squared or squared Euclidean."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    if X.shape[1] != Y.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if kind == "rbf-chi2":
        if (X < 0).any() or (Y < 0).any():
            raise InvalidInputError("chi-squared kernel needs non-negative histogram entries")
        return kernels.chi2_distances(X, Y)
    if kind == "rbf":
        return kernels.sq_euclidean_distances(X, Y)
    raise InvalidInputError(f"kernel kind {kind!r} has no base distance")


def kernel_matrix(spec: KernelSpec, X, Y=None) -> np.ndarray:
    X = _as_matrix(X)
    Y = X if Y is None else _as_matrix(Y)
    if X.shape[1] != Y.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "linear":
        return X @ Y.T
    if spec.sigma2 is None:
        raise InvalidInputError("kernel bandwidth not set; call KernelSpec.resolve first")
    return np.exp(-base_distances(X, Y, spec.kind) / spec.sigma2)


def chi2_kernel(a, b, sigma2: float) -> float:
    """RBF-chi2 kernel value ``exp(-chi2(a, b) / sigma2)`` between two histograms."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not sigma2 > 0:
        raise InvalidInputError(f"sigma2 must be > 0, got {sigma2}")
    return float(kernel_matrix(KernelSpec("rbf-chi2", sigma2), a, b)[0, 0])


def select_sigma2(X, kind: str = "rbf-chi2", quantile: float = 0.25) -> float:
    """Bandwidth from the first quartile of all pairwise base distances.

    Uses linear interpolation between order statistics. A zero quartile falls
    back to the smallest positive distance; all-zero distances are an error.
    """
    X = _as_matrix(X)
    if X.shape[0] < 2:
        raise InvalidInputError("need at least two rows to select a bandwidth")
    if kind == "linear":
        raise InvalidInputError("linear kernel has no bandwidth")
    D = base_distances(X, X, kind)
    iu = np.triu_indices(X.shape[0], k=1)
    dists = D[iu]
    value = float(np.quantile(dists, quantile))
    if value > 0:
        return value
    positive = dists[dists > 0]
    if positive.size == 0:
        raise NumericalError("degenerate data: every pairwise distance is zero")
    fallback = float(positive.min())
    log.info("first-quartile distance is zero; falling back to smallest positive %.3g", fallback)
    return fallback


# --------------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # target_dim x D, orthonormal rows
    explained_variance: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def transform(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.mean.shape[0]:
            raise InvalidInputError(f"expected dimension {self.mean.shape[0]}, got {X.shape[1]}")
        return (X - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def fit_pca(X, target_dim: int) -> PcaProjection:
    """Mean and top ``target_dim`` principal directions of the rows of ``X``."""
    X = _as_matrix(X)
    n, D = X.shape
    if not 1 <= target_dim <= min(n, D):
        raise InvalidInputError(f"target_dim = {target_dim} must lie in [1, min(m, D) = {min(n, D)}]")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = fix_signs(Vt[:target_dim].T).T
    var = s[:target_dim] ** 2 / max(n - 1, 1)
    return PcaProjection(mean, comps, var)


# --------------------------------------------------------------------------- KISSME

def _second_moment(diffs):
    diffs = np.asarray(diffs, dtype=np.float64)
    return diffs.T @ diffs / diffs.shape[0]


def _ridged_inverse(S, ridge, name):
    d = S.shape[0]
    S = (S + S.T) / 2
    if ridge is None:
        ridge = 1e-6 * np.trace(S) / d
    if ridge < 0:
        raise InvalidInputError(f"ridge must be >= 0, got {ridge}")
    S = S + ridge * np.eye(d)
    evals = np.linalg.eigvalsh(S)
    if evals[0] <= 1e-12 * max(evals[-1], np.finfo(float).tiny):
        raise NumericalError(
            f"{name} is numerically singular (eigenvalues {evals[0]:.3g} .. {evals[-1]:.3g}); "
            f"use a positive ridge or more pairs")
    inv = np.linalg.inv(S)
    return S, (inv + inv.T) / 2


def clip_spectrum(M):
    """Project a symmetric matrix onto the PSD cone by zeroing negative eigenvalues."""
    M = (M + M.T) / 2
    evals, evecs = np.linalg.eigh(M)
    evals = np.clip(evals, 0.0, None)
    out = (evecs * evals) @ evecs.T
    return (out + out.T) / 2, evals, evecs


@dataclass(frozen=True, eq=False)
class KissmeModel(BaseMetric):
    """Mahalanobis metric ``(a - b)^T M (a - b)`` in an optional PCA subspace."""

    M: np.ndarray
    sigma_S: np.ndarray
    sigma_D: np.ndarray
    pca: PcaProjection | None = None
    feature_name: str = ""
    M_raw: np.ndarray | None = None
    _factor: np.ndarray = field(init=False, repr=False)

    kind = "mahalanobis"

    def __post_init__(self):
        _, evals, evecs = clip_spectrum(self.M)
        object.__setattr__(self, "_factor", (evecs * np.sqrt(evals)).T)

    def embed(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if self.pca is not None:
            X = self.pca.transform(X)
        elif X.shape[1] != self.M.shape[0]:
            raise InvalidInputError(f"expected dimension {self.M.shape[0]}, got {X.shape[1]}")
        return X @ self._factor.T

    def pairwise(self, A, B) -> np.ndarray:
        return kernels.sq_euclidean_distances(self.embed(A), self.embed(B))


def kissme_from_differences(similar_diffs, dissimilar_diffs, ridge=None, feature_name=""):
    """KISSME metric from explicit difference vectors of similar and dissimilar pairs."""
    S_S = _second_moment(similar_diffs)
    S_D = _second_moment(dissimilar_diffs)
    return _kissme_from_moments(S_S, S_D, ridge, None, feature_name)


def _kissme_from_moments(S_S, S_D, ridge, pca, feature_name):
    sigma_S, inv_S = _ridged_inverse(S_S, ridge, "sigma_S (similar-pair covariance)")
    sigma_D, inv_D = _ridged_inverse(S_D, ridge, "sigma_D (dissimilar-pair covariance)")
    M_raw = inv_S - inv_D
    M, _, _ = clip_spectrum(M_raw)
    return KissmeModel(M, sigma_S, sigma_D, pca, feature_name, (M_raw + M_raw.T) / 2)


def _all_cross_moment(A, B):
    """Second moment of ``a_i - b_j`` over all ordered pairs with ``i != j``."""
    m = A.shape[0]
    sa, sb = A.sum(axis=0), B.sum(axis=0)
    full = m * (A.T @ A) + m * (B.T @ B) - np.outer(sa, sb) - np.outer(sb, sa)
    diag = (A - B).T @ (A - B)
    return (full - diag) / (m * (m - 1))


def fit_kissme(view_a: DescriptorSet, view_b: DescriptorSet, pairs=None, ridge=None,
               pca_dim: int | None = 64, seed: int = 0, full_pairs_limit: int = 500) -> KissmeModel:
    """Fit KISSME on matched identities across two views.

    ``pairs`` lists identity ids present in both views (default: all shared
    ids, in view A order). Dissimilar pairs are every cross-identity pair when
    at most ``full_pairs_limit`` identities are used, otherwise a seeded
    uniform sample ten times the number of similar pairs. PCA is fitted on the
    stacked rows of both views; ``pca_dim`` is capped at half the number of
    matched pairs so the similar-pair covariance stays well conditioned.
    """
    if view_a.dimension != view_b.dimension:
        raise InvalidInputError("views have different descriptor dimensions")
    if pairs is None:
        shared = set(view_b.identities)
        pairs = [i for i in view_a.identities if i in shared]
    A = view_a.descriptors[view_a.index_of(pairs)]
    B = view_b.descriptors[view_b.index_of(pairs)]
    m = A.shape[0]
    if m < 2:
        raise InvalidInputError("KISSME needs at least two matched identities")
    pca = None
    if pca_dim is not None:
        dim = min(int(pca_dim), view_a.dimension, max(1, m // 2))
        if dim < pca_dim:
            log.info("%s: PCA dimension capped at %d", view_a.feature_name, dim)
        pca = fit_pca(np.vstack([A, B]), dim)
        A, B = pca.transform(A), pca.transform(B)
    S_S = _second_moment(A - B)
    if m <= full_pairs_limit:
        S_D = _all_cross_moment(A, B)
    else:
        rng = np.random.default_rng(seed)
        count = 10 * m
        i = rng.integers(0, m, size=count)
        j = (i + rng.integers(1, m, size=count)) % m  # uniform over j != i
        S_D = _second_moment(A[i] - B[j])
    return _kissme_from_moments(S_S, S_D, ridge, pca, view_a.feature_name)


# --------------------------------------------------------------------------- kernel LFDA

def local_scaling_affinity(sqdist, labels, knn: int = 7) -> np.ndarray:
    """Within-class local-scaling affinity ``exp(-d_ij / (s_i s_j))``.

    ``s_i`` is the distance from row ``i`` to its ``knn``-th nearest neighbour
    of the same class (capped at class size - 1). Cross-class entries are 0,
    as are pairs whose scale product vanishes.
    """
    n = sqdist.shape[0]
    A = np.zeros((n, n))
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        sub = sqdist[np.ix_(idx, idx)]
        kk = min(knn, idx.size - 1)
        scale = np.sqrt(np.sort(sub, axis=0)[kk])
        local = np.outer(scale, scale)
        with np.errstate(divide="ignore", invalid="ignore"):
            aff = np.where(local > 0, np.exp(-sub / local), 0.0)
        A[np.ix_(idx, idx)] = aff
    return A


def lfda_weights(A, labels):
    """Pairwise weights of the local within- and between-class scatter."""
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    nc = counts[inverse][:, None].astype(np.float64)
    Ww = np.where(same, A / nc, 0.0)
    Wb = np.where(same, A * (1.0 / n - 1.0 / nc), 1.0 / n)
    return Ww, Wb


def _laplacian(W):
    return np.diag(W.sum(axis=1)) - W


@dataclass(frozen=True, eq=False)
class KlfdaModel(BaseMetric):
    """Kernel LFDA projection; distance is squared Euclidean between projections.

    A new descriptor ``x`` maps to ``alpha^T [k(x, anchor_1), ..., k(x, anchor_n)]``.
    With ``nystrom`` set, descriptors are first embedded by the Nystrom map and
    the kernel acts on the embeddings.
    """

    alpha: np.ndarray
    anchors: np.ndarray
    kernel: KernelSpec
    beta: float = 0.01
    eigenvalues: np.ndarray | None = None
    feature_name: str = ""
    nystrom: object = None
    _linear_map: np.ndarray | None = field(init=False, repr=False)

    kind = "kernel-projection"

    def __post_init__(self):
        lin = self.anchors.T @ self.alpha if self.kernel.kind == "linear" else None
        object.__setattr__(self, "_linear_map", lin)

    @property
    def r(self) -> int:
        return self.alpha.shape[1]

    def project(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if self.nystrom is not None:
            X = self.nystrom.embed(X)
        if X.shape[1] != self.anchors.shape[1]:
            raise InvalidInputError(f"expected dimension {self.anchors.shape[1]}, got {X.shape[1]}")
        if self._linear_map is not None:
            return X @ self._linear_map
        return kernel_matrix(self.kernel, X, self.anchors) @ self.alpha

    def pairwise(self, A, B) -> np.ndarray:
        return kernels.sq_euclidean_distances(self.project(A), self.project(B))


def klfda_scatter(K, labels, knn=7):
    """Local between- and within-class scatter in kernel coefficient space.

    Returns ``(K L_b K, K L_w K)`` for the graph Laplacians of the LFDA weights,
    with the affinity computed from kernel-induced squared distances.
    """
    diag = np.diag(K)
    sqdist = np.clip(diag[:, None] + diag[None, :] - 2 * K, 0.0, None)
    A = local_scaling_affinity(sqdist, labels, knn)
    Ww, Wb = lfda_weights(A, labels)
    Sb = K @ _laplacian(Wb) @ K
    Sw = K @ _laplacian(Ww) @ K
    return (Sb + Sb.T) / 2, (Sw + Sw.T) / 2


def fit_klfda(X, labels, kernel: KernelSpec | None = None, beta: float = 0.01, r: int | None = None,
              knn: int = 7, feature_name: str | None = None, nystrom=None) -> KlfdaModel:
    """Fit kernel LFDA on stacked training rows with one identity label per row.

    Solves ``K L_b K a = lambda (K L_w K + beta I) a`` and keeps the top ``r``
    generalized eigenvectors (default ``min(n - 1, 40)``).
    """
    if feature_name is None:
        feature_name = X.feature_name if isinstance(X, DescriptorSet) else ""
    kernel = KernelSpec() if kernel is None else kernel
    X = _as_matrix(X)
    if nystrom is not None:
        X = nystrom.embed(X)
        kernel = KernelSpec("linear")
    labels = np.asarray([str(v) for v in labels])
    n = X.shape[0]
    if labels.shape[0] != n:
        raise InvalidInputError(f"{labels.shape[0]} labels for {n} rows")
    uniq, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise InvalidInputError(f"identity {uniq[counts < 2][0]!r} has a single sample; "
                                f"every class needs at least two")
    if not beta > 0:
        raise InvalidInputError(f"beta must be > 0, got {beta}")
    r = min(n - 1, 40) if r is None else int(r)
    if not 1 <= r <= n:
        raise InvalidInputError(f"r = {r} must lie in [1, n = {n}]")
    kernel = kernel.resolve(X)
    K = kernel_matrix(kernel, X)
    K = (K + K.T) / 2
    evals = np.linalg.eigvalsh(K)
    if evals[0] < -1e-8 * max(1.0, abs(evals[-1])):
        raise NumericalError(f"kernel matrix is not PSD (min eigenvalue {evals[0]:.3g})")
    Sb, Sw = klfda_scatter(K, labels, knn)
    Sw = Sw + beta * np.eye(n)
    vals, vecs = scipy.linalg.eigh(Sb, Sw, subset_by_index=[n - r, n - 1])
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], fix_signs(vecs[:, order])
    if not np.all(np.isfinite(vecs)):
        raise NumericalError("kLFDA projection has non-finite entries")
    return KlfdaModel(vecs, X.copy(), kernel, beta, vals, feature_name, nystrom)
