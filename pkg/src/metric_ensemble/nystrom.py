"""Nystrom low-rank kernel approximation and kernel spectrum diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base_metrics import KernelSpec, _as_matrix, fix_signs, kernel_matrix
from .errors import InvalidInputError, NumericalError

DENSE_EIGEN_LIMIT = 2000


@dataclass(frozen=True)
class NystromMap:
    """Explicit feature map ``z(x) = D_r^{-1/2} V_r^T [k(x, anchor_1), ...]``.

    ``eigenvalues`` (descending, all positive) and ``eigenvectors`` come from
    the kernel matrix over the sampled anchors.
    """

    anchors: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kernel: KernelSpec
    anchor_index: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def sample_count(self) -> int:
        return self.anchors.shape[0]

    def embed(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.anchors.shape[1]:
            raise InvalidInputError(f"expected dimension {self.anchors.shape[1]}, got {X.shape[1]}")
        C = kernel_matrix(self.kernel, X, self.anchors)
        return (C @ self.eigenvectors) / np.sqrt(self.eigenvalues)


def embed(nmap: NystromMap, x) -> np.ndarray:
    """Embed one descriptor (1-D input) or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    Z = nmap.embed(x)
    return Z[0] if x.ndim == 1 else Z


def fit_nystrom(X, sample_count: int, r: int, kernel: KernelSpec, seed: int = 0,
                rel_threshold: float = 1e-12) -> NystromMap:
    """Sample ``sample_count`` anchors uniformly without replacement and keep rank ``r``.

    Eigenvalues at or below ``rel_threshold`` times the largest are dropped,
    which can leave fewer than ``r`` dimensions.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    if not 1 <= r <= sample_count <= n:
        raise InvalidInputError(f"need 1 <= r ({r}) <= sample_count ({sample_count}) <= n ({n})")
    kernel = kernel.resolve(X)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=sample_count, replace=False))
    anchors = X[idx].copy()
    Kh = kernel_matrix(kernel, anchors)
    evals, evecs = np.linalg.eigh((Kh + Kh.T) / 2)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if not evals[0] > 0:
        raise NumericalError("degenerate kernel: no positive eigenvalue on the sampled anchors")
    keep = min(r, int(np.sum(evals > rel_threshold * evals[0])))
    return NystromMap(anchors, evals[:keep].copy(), fix_signs(evecs[:, :keep]), kernel, idx)


def eigen_spectrum(X, kernel: KernelSpec, limit: int = DENSE_EIGEN_LIMIT) -> np.ndarray:
    """Descending eigenvalues of the full kernel matrix over the rows of ``X``."""
    X = _as_matrix(X)
    n = X.shape[0]
    if n > limit:
        raise InvalidInputError(
            f"{n} rows exceed the dense eigensolver limit of {limit}; subsample the data "
            f"or raise the limit explicitly")
    kernel = kernel.resolve(X)
    K = kernel_matrix(kernel, X)
    return np.linalg.eigvalsh((K + K.T) / 2)[::-1].copy()
