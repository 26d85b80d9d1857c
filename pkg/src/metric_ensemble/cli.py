"""Command-line front end: ``metric-ensemble {train,evaluate,sweep,synth,spectrum}``.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 data error, 4 convergence error, 5 sweep finished with failed points.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import pipeline
from .base_metrics import KernelSpec
from .data import SyntheticSpec, generate_synthetic, save_descriptors
from .errors import ConfigError, ConvergenceError, DataError, InvalidInputError, MetricEnsembleError
from .nystrom import DENSE_EIGEN_LIMIT, eigen_spectrum

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5

log = logging.getLogger("metric_ensemble")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageError):
        return exit_code(exc.cause)
    if isinstance(exc, (ConfigError, InvalidInputError)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    return EXIT_ERROR


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from None


def _add_config_flags(p):
    """One ``--flag`` per RunConfig field; dict and list fields take JSON."""
    p.add_argument("--config", help="JSON run config; flags below override its entries")
    hints = typing.get_type_hints(pipeline.RunConfig)
    for f in dataclasses.fields(pipeline.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        hint = str(hints[f.name])
        if "int" in hint and "float" not in hint:
            kind = int
        elif "float" in hint:
            kind = float
        elif "dict" in hint or "list" in hint or f.name == "metrics":
            kind = _json_arg if f.name != "metrics" else _metrics_arg
        else:
            kind = str
        p.add_argument(flag, dest=f.name, type=kind, default=None)


def _metrics_arg(text):
    return _json_arg(text) if text.lstrip().startswith("{") else text


def _run_config(args) -> pipeline.RunConfig:
    base = {}
    if args.config:
        base = pipeline.RunConfig.load(args.config).to_dict()
    for f in dataclasses.fields(pipeline.RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    if base.get("manifest") is not None and getattr(args, "manifest", None) is not None:
        base["synthetic"] = None
    return pipeline.RunConfig.from_dict(base)


# --------------------------------------------------------------------------- commands

def cmd_train(args):
    cfg = _run_config(args)
    summary = pipeline.train(cfg)
    for r, w, nu in summary:
        print(f"repeat {r}\tnu={nu:g}\tw={' '.join(f'{x:.6g}' for x in w)}")
    print(f"bundle written to {cfg.output}")
    return EXIT_OK


def cmd_evaluate(args):
    dataset = None
    if args.manifest:
        from .data import load_descriptors
        dataset = load_descriptors(args.manifest)
    pipeline.evaluate(args.bundle, dataset, args.output)
    out = Path(args.output or args.bundle)
    sys.stdout.write((out / "summary.tsv").read_text())
    return EXIT_OK


def _parse_values(axis, text):
    conv = float if axis == "nu" else int
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values for axis {axis}: {exc}") from None


def cmd_sweep(args):
    cfg = _run_config(args)
    rows, failures = pipeline.sweep(cfg, args.axis, _parse_values(args.axis, args.values))
    sys.stdout.write((Path(cfg.output) / "sweep.tsv").read_text())
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_synth(args):
    spec = SyntheticSpec(
        identities=args.identities, dims=tuple(args.dims), informativeness=tuple(args.informativeness),
        noise=args.noise, latent_dim=args.latent_dim, histogram=not args.no_histogram, seed=args.seed,
        names=tuple(args.names or ()))
    path = save_descriptors(args.output, generate_synthetic(spec))
    print(path)
    return EXIT_OK


def cmd_spectrum(args):
    if args.manifest:
        from .data import load_descriptors
        dataset = load_descriptors(args.manifest)
    else:
        dataset = generate_synthetic(SyntheticSpec(seed=args.seed))
    names = [args.channel] if args.channel else list(dataset.names)
    lines = ["channel\tindex\teigenvalue\tcumulative_fraction"]
    for name in names:
        if name not in dataset.channels:
            raise ConfigError(f"unknown channel {name!r}; available: {list(dataset.names)}")
        a, b = dataset.channels[name]
        X = np.vstack([a.descriptors, b.descriptors]) if args.view == "both" else \
            (a if args.view == "a" else b).descriptors
        ev = eigen_spectrum(X, KernelSpec(args.kernel, args.sigma2), args.limit)
        cum = np.cumsum(np.clip(ev, 0, None)) / max(np.clip(ev, 0, None).sum(), np.finfo(float).tiny)
        lines += [f"{name}\t{i + 1}\t{e:.12g}\t{c:.6f}" for i, (e, c) in enumerate(zip(ev, cum))]
    text = "\n".join(lines) + "\n"
    if args.output:
        pipeline.write_text_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metric-ensemble", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit base metrics and ensemble weights for every split repeat")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CMC / rank table / MRR for a trained bundle")
    p.add_argument("bundle")
    p.add_argument("--manifest", help="descriptor manifest (default: the data the bundle was trained on)")
    p.add_argument("--output", help="report directory (default: the bundle directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate once per value of one parameter")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 10,20,30,40,50")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic dataset in the manifest format")
    d = SyntheticSpec()
    p.add_argument("--output", required=True)
    p.add_argument("--identities", type=int, default=d.identities)
    p.add_argument("--dims", type=int, nargs="+", default=list(d.dims))
    p.add_argument("--informativeness", type=float, nargs="+", default=list(d.informativeness))
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--latent-dim", type=int, default=d.latent_dim)
    p.add_argument("--no-histogram", action="store_true")
    p.add_argument("--names", nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spectrum", help="eigenvalues of the kernel matrix per channel")
    p.add_argument("--manifest", help="descriptor manifest (default: default synthetic data)")
    p.add_argument("--seed", type=int, default=0, help="synthetic seed when no manifest is given")
    p.add_argument("--channel")
    p.add_argument("--view", choices=("a", "b", "both"), default="both")
    p.add_argument("--kernel", default="rbf-chi2")
    p.add_argument("--sigma2", type=float)
    p.add_argument("--limit", type=int, default=DENSE_EIGEN_LIMIT)
    p.add_argument("--output")
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MetricEnsembleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
