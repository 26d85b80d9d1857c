"""Ranking, per-probe distance normalisation, CMC curves and mean reciprocal rank."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .types import DescriptorSet, WeightVector

RANK_GRID = (1, 2, 5, 10, 20, 50, 100)


@dataclass(frozen=True)
class RankingResult:
    probe_id: str
    gallery_order: tuple
    true_rank: int

    def __post_init__(self):
        if not 1 <= self.true_rank <= len(self.gallery_order):
            raise InvalidInputError(f"true rank {self.true_rank} outside [1, {len(self.gallery_order)}]")


@dataclass(frozen=True)
class CmcCurve:
    recognition_rate: np.ndarray  # entry k-1 is CMC(k)
    repeats: int = 1

    def at(self, rank: int) -> float:
        return float(self.recognition_rate[min(rank, len(self.recognition_rate)) - 1])


def normalize_probe_distances(distances) -> np.ndarray:
    """Affine map of one probe's gallery distances onto [0, 1]; constant input maps to 0.

    The map is monotone, so rankings are kept; rounding can only merge values
    that differ by less than the float resolution of the range.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise InvalidInputError("empty gallery")
    return normalize_rows(d[None, :])[0]


def normalize_rows(D) -> np.ndarray:
    """Row-wise version of :func:`normalize_probe_distances`."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] == 0:
        raise InvalidInputError("expected a non-empty probe x gallery matrix")
    if not np.all(np.isfinite(D)):
        raise InvalidInputError("distances must be finite")
    lo = D.min(axis=1, keepdims=True)
    span = D.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(D)
    np.divide(D - lo, span, out=out, where=span > 0)
    return out


def rank_order(scores) -> np.ndarray:
    """Ascending order of each row; ties fall back to gallery (column) order."""
    return np.argsort(np.asarray(scores), axis=-1, kind="stable")


def channel_distances(metrics, probe_sets, gallery_sets) -> np.ndarray:
    """``T x n_probe x n_gallery`` raw base distances, one slice per channel."""
    if not (len(metrics) == len(probe_sets) == len(gallery_sets)):
        raise InvalidInputError(
            f"channel mismatch: {len(metrics)} metrics, {len(probe_sets)} probe and "
            f"{len(gallery_sets)} gallery sets")
    out = []
    for metric, P, G in zip(metrics, probe_sets, gallery_sets):
        names = {metric.feature_name, P.feature_name, G.feature_name} - {""}
        if len(names) > 1:
            raise InvalidInputError(f"channel mismatch: {sorted(names)}")
        out.append(metric.pairwise(P.descriptors, G.descriptors))
    return np.stack(out)


def ensemble_scores(w, distances) -> np.ndarray:
    """Per-channel row-normalised distances combined with weights ``w``."""
    wv = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    D = np.asarray(distances, dtype=np.float64)
    if D.shape[0] != wv.shape[0]:
        raise InvalidInputError(f"{D.shape[0]} channels but {wv.shape[0]} weights")
    return np.einsum("t,tij->ij", wv, np.stack([normalize_rows(Dt) for Dt in D]))


def rank_from_distances(w, distances, probe_ids, gallery_ids) -> list:
    """Rank every probe given a ``T x n_probe x n_gallery`` raw distance cube."""
    scores = ensemble_scores(w, distances)
    gallery_ids = tuple(gallery_ids)
    lookup = {g: j for j, g in enumerate(gallery_ids)}
    results = []
    for i, pid in enumerate(probe_ids):
        order = rank_order(scores[i])
        if pid not in lookup:
            raise InvalidInputError(f"probe {pid!r} has no match in the gallery")
        true_rank = int(np.flatnonzero(order == lookup[pid])[0]) + 1
        results.append(RankingResult(pid, tuple(gallery_ids[j] for j in order), true_rank))
    return results


def rank_gallery(w, metrics, probe: Sequence, gallery: Sequence[DescriptorSet], probe_id=None) -> RankingResult:
    """Rank one probe against the gallery.

    ``probe`` holds one descriptor vector per channel (or a one-row
    DescriptorSet per channel); ``gallery`` one DescriptorSet per channel.
    """
    if not (len(metrics) == len(probe) == len(gallery)):
        raise InvalidInputError("channel mismatch between metrics, probe and gallery")
    rows = []
    for p in probe:
        if isinstance(p, DescriptorSet):
            probe_id = p.identities[0] if probe_id is None else probe_id
            rows.append(p.descriptors[:1])
        else:
            rows.append(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    D = np.stack([m.pairwise(r, g.descriptors) for m, r, g in zip(metrics, rows, gallery)])
    gallery_ids = gallery[0].identities
    if any(g.identities != gallery_ids for g in gallery):
        raise InvalidInputError("gallery channels disagree on identity order")
    return rank_from_distances(w, D, [probe_id], gallery_ids)[0]


def cmc_curve(results: Sequence[RankingResult]) -> CmcCurve:
    """``CMC(k)`` = fraction of probes whose true match is within the top ``k``."""
    if not results:
        raise InvalidInputError("no ranking results")
    sizes = {len(r.gallery_order) for r in results}
    if len(sizes) != 1:
        raise InvalidInputError(f"mixed gallery sizes {sorted(sizes)}")
    n = sizes.pop()
    ranks = np.array([r.true_rank for r in results])
    counts = np.bincount(ranks, minlength=n + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(results))


def mean_reciprocal_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise InvalidInputError("no ranking results")
    return float(np.mean([1.0 / r.true_rank for r in results]))


def average_curves(curves: Sequence[CmcCurve]):
    """Mean and sample standard deviation across split repeats."""
    R = np.stack([c.recognition_rate for c in curves])
    std = R.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(R.shape[1])
    return CmcCurve(R.mean(axis=0), len(curves)), std


def format_cmc_table(curves: Sequence[CmcCurve], ranks=None, sep="\t") -> str:
    """Delimited text: rank, one rate column per repeat, mean, std."""
    mean, std = average_curves(curves)
    n = len(mean.recognition_rate)
    ranks = range(1, n + 1) if ranks is None else [r for r in ranks if r <= n]
    buf = io.StringIO()
    header = ["rank"] + [f"repeat_{i}" for i in range(len(curves))] + ["mean", "std"]
    buf.write(sep.join(header) + "\n")
    for r in ranks:
        row = [str(r)] + [f"{c.at(r):.6f}" for c in curves] + [f"{mean.at(r):.6f}", f"{std[r - 1]:.6f}"]
        buf.write(sep.join(row) + "\n")
    return buf.getvalue()
