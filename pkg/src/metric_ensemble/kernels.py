"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Both expose ``chi2_distances``, ``sq_euclidean_distances`` and
``topk_smallest``; results agree to rounding.
"""

import logging

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_impl = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return ["compiled", "python"] if _ckernels is not None else ["python"]


def get_backend() -> str:
    return "compiled" if _impl is _ckernels else "python"


def set_backend(name: str) -> None:
    """Switch between ``"compiled"`` and ``"python"`` kernels for this process."""
    global _impl
    if name == "python":
        _impl = _pykernels
    elif name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; reinstall with a C++ compiler")
        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    log.debug("kernel backend set to %s", name)


def chi2_distances(X, Y):
    return _impl.chi2_distances(X, Y)


def sq_euclidean_distances(X, Y):
    return _impl.sq_euclidean_distances(X, Y)


def topk_smallest(S, k):
    return _impl.topk_smallest(S, int(k))
