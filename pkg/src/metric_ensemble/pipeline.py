"""End-to-end train / evaluate / sweep on top of the library, plus model bundles on disk."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .base_metrics import (KernelSpec, KissmeModel, KlfdaModel, PcaProjection, fit_kissme, fit_klfda,
                           kernel_matrix)
from .data import (Dataset, DistanceCube, SplitSpec, SyntheticSpec, cross_validate_nu, fold_indices,
                   generate_synthetic, load_descriptors, make_splits)
from .ensemble import TOP_NU_GRID, TRIPLET_NU_GRID, CuttingPlaneConfig, fit_ensemble
from .errors import ConfigError, MetricEnsembleError
from .evaluation import (RANK_GRID, CmcCurve, average_curves, channel_distances, cmc_curve,
                         format_cmc_table, mean_reciprocal_rank, normalize_rows, rank_from_distances)
from .nystrom import NystromMap, fit_nystrom
from .types import TripletDistanceTable, WeightVector

log = logging.getLogger(__name__)

METRIC_CHOICES = ("kissme", "klfda", "klfda+nystrom")


class StageError(MetricEnsembleError):
    """Wraps a failure with the pipeline stage and split repeat it happened in."""

    def __init__(self, stage, repeat, cause):
        super().__init__(f"stage {stage!r}, repeat {repeat}: {cause}")
        self.stage, self.repeat, self.cause = stage, repeat, cause


# --------------------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    """Everything a run depends on; persisted verbatim with every bundle."""

    manifest: str | None = None
    synthetic: dict | None = None
    metrics: object = "kissme"  # one choice for all channels, or {channel: choice}
    pca_dim: int = 64
    kernel: dict = field(default_factory=lambda: {"kind": "rbf-chi2", "sigma2": None})
    beta: float = 0.01
    klfda_dim: int | None = None
    nystrom_samples: int = 300
    nystrom_rank: int | None = None
    solver: str = "cmc-top"
    nu: float | None = None
    nu_grid: list | None = None
    cv_folds: int = 3
    table_folds: int = 3  # < 2: training distances from the final (in-sample) base metrics
    k: int | None = None
    epsilon: float = 1e-6
    max_iterations: int = 1000
    qp_tolerance: float = 1e-8
    train_count: int | None = None
    test_count: int | None = None
    repeats: int = 10
    seed: int = 0
    jobs: int = 1
    output: str = "run"

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of 'manifest' or 'synthetic'")
        if self.solver not in ("cmc-top", "cmc-triplet"):
            raise ConfigError(f"solver must be cmc-top or cmc-triplet, got {self.solver!r}")
        choices = self.metrics.values() if isinstance(self.metrics, dict) else [self.metrics]
        for c in choices:
            if c not in METRIC_CHOICES:
                raise ConfigError(f"unknown base metric {c!r}; expected one of {METRIC_CHOICES}")
        if self.nu is not None and self.nu <= 0:
            raise ConfigError("nu must be > 0")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.repeats < 1 or self.cv_folds < 2 or self.jobs < 1 or self.table_folds < 0:
            raise ConfigError("repeats >= 1, cv_folds >= 2, table_folds >= 0 and jobs >= 1 required")
        try:
            KernelSpec(**self.kernel)
            if self.synthetic is not None:
                SyntheticSpec(**self.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def metric_for(self, channel):
        if isinstance(self.metrics, dict):
            if channel not in self.metrics:
                raise ConfigError(f"no base metric configured for channel {channel!r}")
            return self.metrics[channel]
        return self.metrics

    def nu_candidates(self):
        if self.nu is not None:
            return [self.nu]
        if self.nu_grid is not None:
            return list(self.nu_grid)
        return list(TOP_NU_GRID if self.solver == "cmc-top" else TRIPLET_NU_GRID)

    def resolved_k(self, train_count):
        k = self.k if self.k is not None else (30 if train_count >= 400 else 10)
        return min(k, train_count - 1)

    def split_spec(self, population):
        train = self.train_count if self.train_count is not None else population // 2
        test = self.test_count if self.test_count is not None else population - train
        return SplitSpec(train, test, self.repeats, self.seed)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.manifest is not None:
        return load_descriptors(cfg.manifest)
    return generate_synthetic(SyntheticSpec(**cfg.synthetic))


# --------------------------------------------------------------------------- model persistence

def _metric_arrays(metric):
    if isinstance(metric, KissmeModel):
        d = {"type": "kissme", "M": metric.M, "sigma_S": metric.sigma_S, "sigma_D": metric.sigma_D}
        if metric.pca is not None:
            d.update(pca_mean=metric.pca.mean, pca_components=metric.pca.components,
                     pca_variance=metric.pca.explained_variance)
        return d
    d = {"type": "klfda", "alpha": metric.alpha, "anchors": metric.anchors,
         "eigenvalues": metric.eigenvalues, "kernel_kind": metric.kernel.kind,
         "sigma2": np.nan if metric.kernel.sigma2 is None else metric.kernel.sigma2, "beta": metric.beta}
    if metric.nystrom is not None:
        n = metric.nystrom
        d.update(ny_anchors=n.anchors, ny_eigenvalues=n.eigenvalues, ny_eigenvectors=n.eigenvectors,
                 ny_kind=n.kernel.kind, ny_sigma2=np.nan if n.kernel.sigma2 is None else n.kernel.sigma2)
    return d


def save_metric(path, metric):
    arrays = _metric_arrays(metric)
    arrays["feature_name"] = metric.feature_name
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_metric(path):
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["type"])
        name = str(z["feature_name"])
        if kind == "kissme":
            pca = None
            if "pca_mean" in z:
                pca = PcaProjection(z["pca_mean"], z["pca_components"], z["pca_variance"])
            return KissmeModel(z["M"], z["sigma_S"], z["sigma_D"], pca, name)

        def spec(kk, s):
            s = float(s)
            return KernelSpec(str(kk), None if np.isnan(s) else s)

        ny = None
        if "ny_anchors" in z:
            ny = NystromMap(z["ny_anchors"], z["ny_eigenvalues"], z["ny_eigenvectors"],
                            spec(z["ny_kind"], z["ny_sigma2"]))
        return KlfdaModel(z["alpha"], z["anchors"], spec(z["kernel_kind"], z["sigma2"]),
                          float(z["beta"]), z["eigenvalues"], name, ny)


def write_text_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path, obj):
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- training

def fit_base_metrics(train: Dataset, cfg: RunConfig, seed: int):
    """Fit one base metric per channel on training identities only."""
    metrics, info = [], {}
    ids = train.identities
    for name, (a, b) in train.channels.items():
        choice = cfg.metric_for(name)
        if choice == "kissme":
            metric = fit_kissme(a, b, pca_dim=cfg.pca_dim, seed=seed)
        else:
            X = np.vstack([a.descriptors, b.descriptors])
            labels = list(ids) + list(ids)
            kernel = KernelSpec(**cfg.kernel).resolve(X)
            nmap = None
            if choice == "klfda+nystrom":
                count = min(cfg.nystrom_samples, X.shape[0])
                rank = min(cfg.nystrom_rank or count, count)
                nmap = fit_nystrom(X, count, rank, kernel, seed)
                Z = nmap.embed(X)
                K = kernel_matrix(kernel, X)
                info[name] = {"nystrom_rel_error": float(np.linalg.norm(Z @ Z.T - K) / np.linalg.norm(K)),
                              "nystrom_rank": nmap.r}
            metric = fit_klfda(X, labels, kernel, cfg.beta, cfg.klfda_dim, feature_name=name, nystrom=nmap)
        metrics.append(metric)
    return metrics, info


def distance_cube(metrics, data: Dataset) -> np.ndarray:
    return channel_distances(metrics, data.view("a"), data.view("b"))


def training_cube(train: Dataset, cfg: RunConfig, seed: int, metrics=None) -> DistanceCube:
    """Raw training distances used to build the triplet table.

    Base metrics fitted on an identity shrink that identity's own matched
    distance, so in-sample distances overrate weak channels. With
    ``cfg.table_folds >= 2`` each probe's row comes from metrics fitted
    without the probe's fold instead.
    """
    ids = train.identities
    if cfg.table_folds < 2:
        return DistanceCube(distance_cube(metrics, train), ids)
    m = len(ids)
    rows = np.empty((len(train.names), m, m))
    for f, held in enumerate(fold_indices(m, cfg.table_folds, seed)):
        rest = [ids[i] for i in np.setdiff1d(np.arange(m), held)]
        fold_metrics, _ = fit_base_metrics(train.subset(rest), cfg, seed + f + 1)
        probes = train.subset([ids[i] for i in held])
        rows[:, held, :] = channel_distances(fold_metrics, probes.view("a"), train.view("b"))
    return DistanceCube(rows, ids)


def train_repeat(dataset: Dataset, cfg: RunConfig, train_ids, repeat: int):
    """Fit base metrics, pick nu and learn weights for one split repeat."""
    seed = cfg.seed + 1000 * repeat
    train = dataset.subset(train_ids)
    stage = "base-metrics"
    try:
        t0 = time.perf_counter()
        metrics, info = fit_base_metrics(train, cfg, seed)
        stage = "triplet-table"
        cube = training_cube(train, cfg, seed, metrics)
        table = cube.table()
        k = cfg.resolved_k(len(train_ids))
        base = CuttingPlaneConfig(nu=1.0, epsilon=cfg.epsilon, k=k, max_iterations=cfg.max_iterations,
                                  qp_tolerance=cfg.qp_tolerance)
        stage = "cross-validation"
        grid = cfg.nu_candidates()
        nu, cv_scores = cross_validate_nu(cube, grid, cfg.cv_folds, base, cfg.solver, seed)
        stage = "ensemble"
        result = fit_ensemble(table, replace(base, nu=nu), cfg.solver)
    except MetricEnsembleError as exc:
        raise StageError(stage, repeat, exc) from exc
    train_log = {
        "repeat": repeat, "nu": nu, "k": k, "cv_scores": {repr(g): s for g, s in cv_scores.items()},
        "rounds": [asdict(r) for r in result.rounds], "converged": result.converged,
        "violation_monotone": result.violation_monotone, "base_metric_info": info,
        "seconds": time.perf_counter() - t0,
    }
    return metrics, result.weights, train_log


def _repeat_dir(out, r):
    return Path(out) / f"repeat_{r:02d}"


def save_repeat(out, r, metrics, weights, train_log, train_ids, test_ids):
    d = _repeat_dir(out, r)
    d.mkdir(parents=True, exist_ok=True)
    for t, metric in enumerate(metrics):
        save_metric(d / f"metric_{t:02d}_{metric.feature_name}.npz", metric)
    write_json(d / "weights.json", {"w": weights.w.tolist(), "xi": weights.xi, "objective": weights.objective,
                                    "channels": [m.feature_name for m in metrics], "nu": train_log["nu"]})
    write_json(d / "split.json", {"train": list(train_ids), "test": list(test_ids)})
    write_json(d / "train_log.json", train_log)


def load_repeat(out, r):
    d = _repeat_dir(out, r)
    with open(d / "weights.json") as fh:
        wd = json.load(fh)
    with open(d / "split.json") as fh:
        split = json.load(fh)
    metrics = [load_metric(p) for p in sorted(d.glob("metric_*.npz"))]
    return metrics, WeightVector(wd["w"], wd["xi"], wd["objective"]), split


def _train_job(args):
    dataset, cfg, r, train_ids, test_ids = args
    metrics, weights, tlog = train_repeat(dataset, cfg, train_ids, r)
    save_repeat(cfg.output, r, metrics, weights, tlog, train_ids, test_ids)
    return r, weights.w.tolist(), tlog["nu"]


def _run_jobs(fn, jobs, n):
    if n <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


def train(cfg: RunConfig, dataset: Dataset | None = None):
    """Train every split repeat and persist the bundle under ``cfg.output``."""
    cfg.validate()
    dataset = dataset or load_dataset(cfg)
    split = cfg.split_spec(len(dataset.identities))
    splits = make_splits(dataset.identities, split)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved.update(train_count=split.train_count, test_count=split.test_count)
    write_json(out / "config.json", resolved)
    jobs = [(dataset, cfg, r, tr, te) for r, (tr, te) in enumerate(splits)]
    summary = _run_jobs(_train_job, jobs, cfg.jobs)
    write_json(out / "bundle.json", {"repeats": len(splits), "channels": list(dataset.names),
                                     "weights": {str(r): w for r, w, _ in summary},
                                     "nu": {str(r): nu for r, _, nu in summary}})
    return summary


# --------------------------------------------------------------------------- evaluation

@dataclass
class Report:
    curves: list
    mrr: list
    rank_grid: tuple = RANK_GRID

    @property
    def mean_curve(self) -> CmcCurve:
        return average_curves(self.curves)[0]

    def summary_text(self, sep="\t"):
        mean, std = average_curves(self.curves)
        n = len(mean.recognition_rate)
        lines = [sep.join(["rank", "mean", "std"])]
        for r in self.rank_grid:
            if r <= n:
                lines.append(sep.join([str(r), f"{mean.at(r):.6f}", f"{std[r - 1]:.6f}"]))
        mrr = np.array(self.mrr)
        mrr_std = mrr.std(ddof=1) if mrr.size > 1 else 0.0
        lines.append(sep.join(["mrr", f"{mrr.mean():.6f}", f"{mrr_std:.6f}"]))
        return "\n".join(lines) + "\n"


def evaluate_repeat(dataset: Dataset, metrics, weights, test_ids):
    test = dataset.subset(test_ids)
    if [m.feature_name for m in metrics] != list(test.names):
        raise MetricEnsembleError(
            f"bundle channels {[m.feature_name for m in metrics]} do not match data channels {list(test.names)}")
    D = distance_cube(metrics, test)
    results = rank_from_distances(weights, D, test.identities, test.identities)
    return results


def evaluate(bundle, dataset: Dataset | None = None, output=None) -> Report:
    """Evaluate every repeat of a bundle on its held-out identities and write reports."""
    bundle = Path(bundle)
    with open(bundle / "config.json") as fh:
        cfg_d = json.load(fh)
    cfg = RunConfig.from_dict({k: v for k, v in cfg_d.items()})
    dataset = dataset or load_dataset(cfg)
    with open(bundle / "bundle.json") as fh:
        repeats = json.load(fh)["repeats"]
    curves, mrr = [], []
    for r in range(repeats):
        metrics, weights, split = load_repeat(bundle, r)
        results = evaluate_repeat(dataset, metrics, weights, split["test"])
        curves.append(cmc_curve(results))
        mrr.append(mean_reciprocal_rank(results))
    report = Report(curves, mrr)
    out = Path(output) if output is not None else bundle
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "cmc.tsv", format_cmc_table(curves))
    write_text_atomic(out / "ranks.tsv", format_cmc_table(curves, RANK_GRID))
    write_text_atomic(out / "summary.tsv", report.summary_text())
    return report


# --------------------------------------------------------------------------- sweeps

SWEEP_AXES = {"nu": "nu", "k": "k", "nystrom-samples": "nystrom_samples"}


def sweep(cfg: RunConfig, axis: str, values, dataset: Dataset | None = None):
    """One train + evaluate cycle per grid value; failures are recorded, not fatal.

    Returns ``(rows, failures)``; ``rows`` also lands in ``sweep.tsv``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    dataset = dataset or load_dataset(cfg)
    root = Path(cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    rows, failures = [], 0
    for v in values:
        point_cfg = replace(cfg, output=str(root / f"{axis}_{v}"), **{SWEEP_AXES[axis]: v})
        try:
            point_cfg.validate()
            train(point_cfg, dataset)
            rep = evaluate(point_cfg.output, dataset)
            rank1 = np.array([c.at(1) for c in rep.curves])
            errs = []
            for r in range(point_cfg.repeats):
                with open(_repeat_dir(point_cfg.output, r) / "train_log.json") as fh:
                    info = json.load(fh)["base_metric_info"]
                errs += [ch["nystrom_rel_error"] for ch in info.values()]
            rows.append({"value": v, "status": "ok", "rank1_mean": float(rank1.mean()),
                         "rank1_std": float(rank1.std(ddof=1)) if rank1.size > 1 else 0.0,
                         "mrr_mean": float(np.mean(rep.mrr)),
                         "kernel_error": float(np.mean(errs)) if errs else float("nan")})
        except MetricEnsembleError as exc:
            failures += 1
            log.error("sweep point %s=%s failed: %s", axis, v, exc)
            rows.append({"value": v, "status": f"failed: {exc}", "rank1_mean": float("nan"),
                         "rank1_std": float("nan"), "mrr_mean": float("nan"), "kernel_error": float("nan")})
    cols = ["value", "status", "rank1_mean", "rank1_std", "mrr_mean", "kernel_error"]
    lines = ["\t".join([axis] + cols[1:])]
    for row in rows:
        lines.append("\t".join(str(row[c]) if isinstance(row[c], str) else
                               (f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c])) for c in cols))
    write_text_atomic(root / "sweep.tsv", "\n".join(lines) + "\n")
    return rows, failures
