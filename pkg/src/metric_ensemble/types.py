"""Shared domain types: descriptor sets, base metrics, triplet tables, orderings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DescriptorSet:
    """Descriptors of one feature channel for one camera view.

    Row ``i`` of ``descriptors`` belongs to ``identities[i]``; that row order
    is the canonical identity order for everything derived from the set.
    """

    feature_name: str
    view: str
    identities: tuple
    descriptors: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.identities)
        X = np.asarray(self.descriptors, dtype=np.float64)
        if X.ndim != 2:
            raise InvalidInputError(
                f"{self.feature_name}/{self.view}: descriptors must be a 2-D matrix, got shape {X.shape}")
        if X.shape[0] != len(ids):
            raise InvalidInputError(
                f"{self.feature_name}/{self.view}: {X.shape[0]} rows but {len(ids)} identities")
        if X.shape[1] < 1:
            raise InvalidInputError(f"{self.feature_name}/{self.view}: dimension must be >= 1")
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"{self.feature_name}/{self.view}: duplicate identity ids")
        bad = ~np.isfinite(X)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise InvalidInputError(
                f"{self.feature_name}/{self.view}: non-finite value in row {row} (identity {ids[row]!r})")
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "descriptors", _frozen(X))

    @property
    def dimension(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self):
        return len(self.identities)

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        lookup = {k: i for i, k in enumerate(self.identities)}
        try:
            return np.array([lookup[str(k)] for k in ids], dtype=np.intp)
        except KeyError as exc:
            raise InvalidInputError(
                f"{self.feature_name}/{self.view}: unknown identity {exc.args[0]!r}") from None

    def subset(self, ids: Sequence[str]) -> "DescriptorSet":
        idx = self.index_of(ids)
        return DescriptorSet(self.feature_name, self.view, tuple(self.identities[i] for i in idx),
                             self.descriptors[idx])


class BaseMetric:
    """A learned per-channel distance function.

    Subclasses implement :meth:`pairwise`; everything else is derived from it.
    ``kind`` is ``"mahalanobis"`` or ``"kernel-projection"``.
    """

    kind: str = ""
    feature_name: str = ""

    def pairwise(self, A, B) -> np.ndarray:
        raise NotImplementedError

    def distance(self, a, b) -> float:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        return float(self.pairwise(a, b)[0, 0])


@dataclass(frozen=True)
class WeightVector:
    """Non-negative ensemble weights with the slack and objective they achieved."""

    w: np.ndarray
    xi: float = 0.0
    objective: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be finite")
        if np.any(w < 0):
            raise InvalidInputError(f"weights must be non-negative, got {w}")
        if self.xi < 0:
            raise InvalidInputError(f"slack must be non-negative, got {self.xi}")
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "objective", float(self.objective))

    def __len__(self):
        return self.w.shape[0]

    def scaled(self, alpha: float) -> "WeightVector":
        return WeightVector(self.w * alpha, self.xi, self.objective)


def weighted_distance(w, d) -> float:
    """Combine per-metric distances ``d`` into ``sum_t w_t d_t``."""
    wv = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.shape != wv.shape:
        raise InvalidInputError(f"distance vector has length {d.shape[0]}, expected {wv.shape[0]}")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("distances must be finite")
    return float(wv @ d)


@dataclass(frozen=True)
class TripletDistanceTable:
    """Base-metric distances for every (probe, true match, wrong match) triplet.

    ``d_plus[i]`` holds the T distances from probe ``i`` to its true match and
    ``d_minus[i, j]`` those to its j-th wrong candidate, whose identity is
    ``candidate_ids[i][j]``.
    """

    d_plus: np.ndarray
    d_minus: np.ndarray
    probe_ids: tuple = ()
    candidate_ids: tuple = ()
    margins: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dp = np.asarray(self.d_plus, dtype=np.float64)
        dm = np.asarray(self.d_minus, dtype=np.float64)
        if dp.ndim != 2 or dm.ndim != 3:
            raise InvalidInputError("d_plus must be m x T and d_minus m x m' x T")
        m, T = dp.shape
        if dm.shape[0] != m or dm.shape[2] != T:
            raise InvalidInputError(f"shape mismatch: d_plus {dp.shape}, d_minus {dm.shape}")
        if m < 1 or T < 1 or dm.shape[1] < 1:
            raise InvalidInputError("table needs at least one probe, one candidate and one metric")
        for name, arr in (("d_plus", dp), ("d_minus", dm)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise InvalidInputError(f"{name} entries must be finite and >= 0")
        probe_ids = tuple(str(p) for p in self.probe_ids) or tuple(str(i) for i in range(m))
        if self.candidate_ids:
            cands = tuple(tuple(str(c) for c in row) for row in self.candidate_ids)
        elif dm.shape[1] <= m - 1:
            cands = tuple(tuple(str(j) for j in range(m) if j != i)[: dm.shape[1]] for i in range(m))
        else:  # more wrong candidates than other probes: abstract labels
            cands = tuple(tuple(f"neg{i}_{j}" for j in range(dm.shape[1])) for i in range(m))
        if len(probe_ids) != m or len(cands) != m or any(len(r) != dm.shape[1] for r in cands):
            raise InvalidInputError("identity labels do not match table shape")
        for pid, row in zip(probe_ids, cands):
            if pid in row:
                raise InvalidInputError(f"probe {pid!r} appears among its own wrong candidates")
        object.__setattr__(self, "d_plus", _frozen(dp))
        object.__setattr__(self, "d_minus", _frozen(dm))
        object.__setattr__(self, "probe_ids", probe_ids)
        object.__setattr__(self, "candidate_ids", cands)
        object.__setattr__(self, "margins", _frozen(dm - dp[:, None, :]))

    @property
    def m(self) -> int:
        return self.d_plus.shape[0]

    @property
    def m_prime(self) -> int:
        return self.d_minus.shape[1]

    @property
    def T(self) -> int:
        return self.d_plus.shape[1]

    def scaled(self, alpha: float) -> "TripletDistanceTable":
        return TripletDistanceTable(self.d_plus * alpha, self.d_minus * alpha,
                                    self.probe_ids, self.candidate_ids)

    @classmethod
    def from_distances(cls, distances, ids: Sequence[str] | None = None) -> "TripletDistanceTable":
        """Build the single-shot table from a ``T x m x m`` probe-by-gallery cube.

        Gallery column ``i`` must hold probe ``i``'s true match; every other
        column becomes a wrong candidate, so ``m' = m - 1``.
        """
        D = np.asarray(distances, dtype=np.float64)
        if D.ndim != 3 or D.shape[1] != D.shape[2]:
            raise InvalidInputError(f"expected a T x m x m distance cube, got {D.shape}")
        T, m, _ = D.shape
        if m < 2:
            raise InvalidInputError("need at least two identities to form triplets")
        ids = tuple(str(i) for i in (ids if ids is not None else range(m)))
        cube = np.moveaxis(D, 0, -1)  # m x m x T
        d_plus = cube[np.arange(m), np.arange(m)]
        off = ~np.eye(m, dtype=bool)
        d_minus = cube[off].reshape(m, m - 1, T)
        cands = tuple(tuple(ids[j] for j in range(m) if j != i) for i in range(m))
        return cls(d_plus, d_minus, ids, cands)


@dataclass(frozen=True)
class OrderingMatrix:
    """Binary matrix ``P`` over (probe, wrong candidate), plus position info.

    ``entries[i, j] = 0`` means the true match of probe ``i`` is ranked above
    candidate ``j``. ``top[i]`` lists the candidate columns occupying ranked
    positions ``1..k`` for probe ``i``; by default the first ``k`` columns.
    """

    entries: np.ndarray
    k: int
    top: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.entries)
        if P.ndim != 2:
            raise InvalidInputError("ordering matrix must be 2-D")
        if not np.all((P == 0) | (P == 1)):
            raise InvalidInputError("ordering entries must be 0 or 1")
        m, mp = P.shape
        k = int(self.k)
        if not 1 <= k <= mp:
            raise InvalidInputError(f"k = {k} must lie in [1, {mp}]")
        top = np.tile(np.arange(k), (m, 1)) if self.top is None else np.asarray(self.top, dtype=np.intp)
        if top.shape != (m, k) or top.min() < 0 or top.max() >= mp:
            raise InvalidInputError(f"top positions must be an {m} x {k} array of column indices")
        if any(len(set(row)) != k for row in top.tolist()):
            raise InvalidInputError("top positions repeat a candidate")
        object.__setattr__(self, "entries", _frozen(P, np.int8))
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "top", _frozen(top, np.intp))

    @property
    def shape(self):
        return self.entries.shape

    def top_entries(self) -> np.ndarray:
        """``m x k`` slice of ``P`` in ranked-position order."""
        return np.take_along_axis(self.entries, self.top, axis=1)

    def key(self) -> frozenset:
        """The (probe, candidate) cells that are set inside the top-k positions.

        Two orderings with the same key induce the same constraint.
        """
        rows, cols = np.nonzero(self.top_entries())
        return frozenset(zip(rows.tolist(), self.top[rows, cols].tolist()))

    @classmethod
    def reference(cls, m: int, m_prime: int, k: int) -> "OrderingMatrix":
        """The correct ordering ``P*``: every entry zero."""
        return cls(np.zeros((m, m_prime), dtype=np.int8), k)
