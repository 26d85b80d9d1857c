"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module, which is
preferred when it was built.
"""

import numpy as np

_CHUNK = 1 << 22  # elements per temporary block


def _rows_per_block(m, d):
    return max(1, _CHUNK // max(1, m * d))


def chi2_distances(X, Y):
    """Pairwise chi-squared distances ``sum_d (x_d - y_d)^2 / (x_d + y_d)``.

    Coordinates where ``x_d + y_d == 0`` contribute nothing.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n, d = X.shape
    m = Y.shape[0]
    out = np.empty((n, m))
    step = _rows_per_block(m, d)
    for start in range(0, n, step):
        xb = X[start:start + step, None, :]
        num = (xb - Y[None]) ** 2
        den = xb + Y[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(den > 0, num / den, 0.0)
        out[start:start + step] = terms.sum(axis=2)
    return out


def sq_euclidean_distances(X, Y):
    """Pairwise squared Euclidean distances from explicit differences.

    Unlike the ``|x|^2 + |y|^2 - 2 x.y`` expansion this is exactly zero on
    identical rows and exactly symmetric.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n, d = X.shape
    m = Y.shape[0]
    out = np.empty((n, m))
    step = _rows_per_block(m, d)
    for start in range(0, n, step):
        diff = X[start:start + step, None, :] - Y[None]
        out[start:start + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def topk_smallest(S, k):
    """Column indices of the ``k`` smallest entries of each row, ascending.

    Ties are broken by column index.
    """
    S = np.asarray(S, dtype=np.float64)
    return np.argsort(S, axis=1, kind="stable")[:, :k].astype(np.intp)
