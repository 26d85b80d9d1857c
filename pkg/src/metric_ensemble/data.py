"""Descriptor datasets: on-disk format, split protocol, synthetic data, nu cross-validation.

On-disk layout
--------------
A plain-text manifest of ``key: value`` lines (``#`` starts a comment) next to
raw matrix files. Every matrix file is little-endian IEEE-754 float64,
row-major, ``rows x dim`` with no header; row ``i`` belongs to line ``i`` of
the view's identity file (one id per line, UTF-8)::

    format: metric-ensemble/1
    dtype: float64
    byte_order: little
    layout: row-major
    channels: lab, lbp
    ids.a: ids_a.txt
    ids.b: ids_b.txt
    channel.lab.dim: 4032
    channel.lab.a: lab_a.f64
    channel.lab.b: lab_b.f64
    channel.lab.ids.b: lab_ids_b.txt   # optional per-channel override

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, InvalidInputError
from .types import DescriptorSet

log = logging.getLogger(__name__)

FORMAT_TAG = "metric-ensemble/1"
VIEWS = ("a", "b")
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class Dataset:
    """Per-channel (view A, view B) descriptor sets with one shared identity order."""

    channels: dict  # name -> (DescriptorSet view A, DescriptorSet view B)

    def __post_init__(self):
        if not self.channels:
            raise DataError("dataset has no channels")
        ids = None
        for name, (a, b) in self.channels.items():
            if ids is None:
                ids = a.identities
            if a.identities != ids or b.identities != ids:
                raise DataError(f"channel {name!r} is not aligned to the canonical identity order")

    @property
    def names(self) -> tuple:
        return tuple(self.channels)

    @property
    def identities(self) -> tuple:
        return next(iter(self.channels.values()))[0].identities

    def view(self, which: str) -> list:
        pos = VIEWS.index(which)
        return [pair[pos] for pair in self.channels.values()]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset({n: (a.subset(ids), b.subset(ids)) for n, (a, b) in self.channels.items()})


# --------------------------------------------------------------------------- file format

def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_descriptors(directory, dataset: Dataset) -> Path:
    """Write ``dataset`` in the manifest format; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = dataset.identities
    lines = [f"format: {FORMAT_TAG}", "dtype: float64", "byte_order: little", "layout: row-major",
             f"channels: {', '.join(dataset.names)}"]
    for v in VIEWS:
        _write_atomic(directory / f"ids_{v}.txt", ("\n".join(ids) + "\n").encode())
        lines.append(f"ids.{v}: ids_{v}.txt")
    for name, pair in dataset.channels.items():
        lines.append(f"channel.{name}.dim: {pair[0].dimension}")
        for v, ds in zip(VIEWS, pair):
            fname = f"{name}_{v}.f64"
            _write_atomic(directory / fname, ds.descriptors.astype("<f8").tobytes(order="C"))
            lines.append(f"channel.{name}.{v}: {fname}")
    path = directory / MANIFEST_NAME
    _write_atomic(path, ("\n".join(lines) + "\n").encode())
    return path


def read_manifest(path) -> dict:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key: value'")
            key, value = line.split(":", 1)
            entries[key.strip()] = value.strip()
    return entries


def _read_ids(path):
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def load_descriptors(path) -> Dataset:
    """Load and validate a dataset; rows are reordered to view A's identity order."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    man = read_manifest(path)
    if man.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise DataError(f"unsupported format {man['format']!r}")
    if man.get("dtype", "float64") != "float64" or man.get("byte_order", "little") != "little" \
            or man.get("layout", "row-major") != "row-major":
        raise DataError("only little-endian row-major float64 matrices are supported")
    if "channels" not in man:
        raise DataError("manifest lists no channels")
    names = [c.strip() for c in man["channels"].split(",") if c.strip()]
    canonical = None
    raw = {}
    for name in names:
        try:
            dim = int(man[f"channel.{name}.dim"])
        except KeyError:
            raise DataError(f"channel {name!r}: missing dim") from None
        for v in VIEWS:
            ids_key = f"channel.{name}.ids.{v}" if f"channel.{name}.ids.{v}" in man else f"ids.{v}"
            if ids_key not in man:
                raise DataError(f"channel {name!r} view {v}: no identity list")
            ids = _read_ids(root / man[ids_key])
            fkey = f"channel.{name}.{v}"
            if fkey not in man:
                raise DataError(f"channel {name!r}: missing matrix file for view {v}")
            fpath = root / man[fkey]
            if not fpath.exists():
                raise DataError(f"channel {name!r} view {v}: file not found: {fpath}")
            data = np.fromfile(fpath, dtype="<f8")
            if data.size != len(ids) * dim:
                raise DataError(f"channel {name!r} view {v}: {data.size} values, expected "
                                f"{len(ids)} rows x {dim}")
            X = data.reshape(len(ids), dim).astype(np.float64)
            bad = ~np.isfinite(X)
            if bad.any():
                row = int(np.argwhere(bad)[0, 0])
                raise DataError(f"channel {name!r} view {v}: non-finite value in row {row} "
                                f"(identity {ids[row]!r})")
            if len(set(ids)) != len(ids):
                raise DataError(f"channel {name!r} view {v}: duplicate identity ids")
            if canonical is None:
                canonical = ids
            missing = [i for i in canonical if i not in set(ids)]
            extra = [i for i in ids if i not in set(canonical)]
            if missing:
                raise DataError(f"channel {name!r} view {v}: identity {missing[0]!r} is missing")
            if extra:
                raise DataError(f"channel {name!r} view {v}: unexpected identity {extra[0]!r}")
            raw[name, v] = (ids, X)
    channels = {}
    for name in names:
        pair = []
        for v in VIEWS:
            ids, X = raw[name, v]
            ds = DescriptorSet(name, v, tuple(ids), X)
            pair.append(ds.subset(canonical))
        channels[name] = tuple(pair)
    return Dataset(channels)


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    test_count: int
    repeats: int = 10
    seed: int = 0

    def validate(self, population: int):
        if self.train_count < 2 or self.test_count < 1:
            raise InvalidInputError("need at least two train and one test identity")
        if self.repeats < 1:
            raise InvalidInputError("repeats must be >= 1")
        if self.train_count + self.test_count > population:
            raise InvalidInputError(
                f"train ({self.train_count}) + test ({self.test_count}) exceeds {population} identities")


def make_splits(ids: Sequence[str], spec: SplitSpec) -> list:
    """Seeded disjoint (train ids, test ids) draws; each list keeps the input order."""
    ids = list(ids)
    spec.validate(len(ids))
    out = []
    for r in range(spec.repeats):
        rng = np.random.default_rng([spec.seed, r])
        perm = rng.permutation(len(ids))
        tr = np.sort(perm[:spec.train_count])
        te = np.sort(perm[spec.train_count:spec.train_count + spec.test_count])
        out.append(([ids[i] for i in tr], [ids[i] for i in te]))
    return out


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Latent-identity generator.

    Each channel sees a random linear projection of the identity's latent
    vector plus a per-view perturbation scaled by ``1 / informativeness``
    (zero informativeness: no identity signal at all) and isotropic noise.
    With ``histogram`` set, rows pass through softplus and L1 normalisation so
    they are valid inputs for the chi-squared kernel.
    """

    identities: int = 200
    dims: tuple = (32, 32, 32)
    informativeness: tuple = (2.0, 1.0, 0.0)
    noise: float = 0.1
    latent_dim: int = 16
    histogram: bool = True
    seed: int = 0
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "informativeness", tuple(float(x) for x in self.informativeness))
        names = tuple(self.names) or tuple(f"ch{t}" for t in range(len(self.dims)))
        object.__setattr__(self, "names", names)
        if self.identities < 4:
            raise InvalidInputError("need at least 4 identities")
        if len(self.dims) < 1 or len(self.dims) != len(self.informativeness) or len(names) != len(self.dims):
            raise InvalidInputError("dims, informativeness and names need one entry per channel")
        if min(self.dims) < 1 or min(self.informativeness) < 0 or self.noise < 0 or self.latent_dim < 1:
            raise InvalidInputError("dims >= 1, informativeness >= 0, noise >= 0 and latent_dim >= 1 required")

    @property
    def channels(self) -> int:
        return len(self.dims)

    def to_dict(self):
        d = asdict(self)
        d["dims"], d["informativeness"], d["names"] = list(self.dims), list(self.informativeness), list(self.names)
        return d


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    m = spec.identities
    ids = tuple(f"id{i:05d}" for i in range(m))
    Z = rng.standard_normal((m, spec.latent_dim))
    channels = {}
    for name, dim, rho in zip(spec.names, spec.dims, spec.informativeness):
        proj = rng.standard_normal((spec.latent_dim, dim)) / math.sqrt(spec.latent_dim)
        signal = Z @ proj if rho > 0 else np.zeros((m, dim))
        pert_scale = 1.0 if rho == 0 else (0.0 if math.isinf(rho) else 1.0 / rho)
        views = []
        for v in VIEWS:
            X = signal + pert_scale * rng.standard_normal((m, dim)) + spec.noise * rng.standard_normal((m, dim))
            if spec.histogram:
                X = np.logaddexp(0.0, X)
                X = X / X.sum(axis=1, keepdims=True)
            views.append(DescriptorSet(name, v, ids, X))
        channels[name] = tuple(views)
    return Dataset(channels)


# --------------------------------------------------------------------------- nu cross-validation

@dataclass
class DistanceCube:
    """Raw per-channel probe-by-gallery distances over one identity set.

    ``distances[t, i, j]`` is channel ``t``'s distance from probe ``i`` (view A)
    to gallery ``j`` (view B); the true match of probe ``i`` is gallery ``i``.
    """

    distances: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.distances.ndim != 3 or self.distances.shape[1] != self.distances.shape[2]:
            raise InvalidInputError("distance cube must be T x m x m")
        self.ids = tuple(self.ids) or tuple(str(i) for i in range(self.distances.shape[1]))

    @property
    def m(self):
        return self.distances.shape[1]

    def restrict(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return self.distances[:, idx][:, :, idx]

    def table(self, idx=None):
        from .evaluation import normalize_rows
        from .types import TripletDistanceTable
        idx = np.arange(self.m) if idx is None else np.asarray(idx)
        sub = self.restrict(idx)
        normed = np.stack([normalize_rows(D) for D in sub])
        return TripletDistanceTable.from_distances(normed, [self.ids[i] for i in idx])

    def rank1(self, w, idx) -> float:
        from .evaluation import cmc_curve, rank_from_distances
        idx = np.asarray(idx)
        ids = [self.ids[i] for i in idx]
        return cmc_curve(rank_from_distances(w, self.restrict(idx), ids, ids)).at(1)


def fold_indices(m: int, folds: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [np.sort(f) for f in np.array_split(rng.permutation(m), folds)]


def cross_validate_nu(cube: DistanceCube, grid: Sequence[float], folds: int = 3, config=None,
                      solver: str = "cmc-top", seed: int = 0):
    """Pick the ``nu`` with the best mean held-out rank-1 rate; ties go to the smaller ``nu``.

    Returns ``(best_nu, {nu: mean rank-1})``. Inside each fold ``k`` is capped
    at the fold's wrong-candidate count.
    """
    from dataclasses import replace

    from .ensemble import CuttingPlaneConfig, fit_ensemble

    grid = [float(g) for g in grid]
    if not grid:
        raise InvalidInputError("empty nu grid")
    if folds < 2:
        raise InvalidInputError("need at least two folds")
    config = config or CuttingPlaneConfig()
    if len(grid) == 1:
        return grid[0], {grid[0]: float("nan")}
    parts = fold_indices(cube.m, folds, seed)
    for f in parts:
        if f.size < 2 or cube.m - f.size < 2:
            raise InvalidInputError(
                f"fold of {f.size} identities (train {cube.m - f.size}) is too small to form triplets")
    scores = {}
    for nu in grid:
        rates = []
        for f in parts:
            train = np.setdiff1d(np.arange(cube.m), f)
            table = cube.table(train)
            cfg = replace(config, nu=nu, k=min(config.k, table.m_prime))
            w = fit_ensemble(table, cfg, solver).weights
            rates.append(cube.rank1(w, f))
        scores[nu] = float(np.mean(rates))
    best = max(sorted(grid), key=lambda g: (scores[g], -g))
    return best, scores
