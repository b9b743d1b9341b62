"""Command line interface.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.
Set STOCHFLOW_LOG=DEBUG|INFO|WARNING to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataFormatError, Dataset, Trajectory
from .diffcore import NonFiniteError
from .latent import OriginError, UnstableDiscretizationError
from .metrics import evaluate
from .model import classify, format_vector_field, grid_points, load_model, save_model
from .trainer import TrainConfig, TrainingAborted, train

log = logging.getLogger("stochflow")

NUMERICAL_ERRORS = (NonFiniteError, UnstableDiscretizationError, OriginError, FloatingPointError)


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _train_config(args) -> TrainConfig:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(_existing(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad config file {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    flags = {
        "latent": args.latent,
        "epochs": args.epochs,
        "lr": args.lr,
        "s_max": args.smax,
        "seed": args.seed,
        "depth": args.depth,
        "clip_norm": args.clip,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if "latent" not in cfg:
        raise UsageError("--latent linear|cycle is required")
    if "seed" not in cfg:
        raise UsageError("--seed is required for training")
    try:
        return TrainConfig(**cfg)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None


def cmd_train(args) -> int:
    dataset = data_mod.load(_existing(args.data))
    config = _train_config(args)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log")
    try:
        model, report = train(dataset, config)
    except TrainingAborted as exc:
        save_model(exc.model, out)
        log_path.write_text(exc.report.format_log())
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 2
    save_model(model, out)
    log_path.write_text(report.format_log())
    print(f"initial_nll={report.initial_nll:.6g} final_nll={report.final_nll:.6g} epochs={report.epochs_run}")
    return 0


def _rng(args, noise_scale: float) -> np.random.Generator:
    if noise_scale > 0 and args.seed is None:
        raise UsageError("--seed is required when --noise-scale > 0")
    return np.random.default_rng(0 if args.seed is None else args.seed)


def cmd_generate(args) -> int:
    model = load_model(_existing(args.model))
    start = np.asarray(args.start, dtype=np.float64)
    if start.size != model.dim:
        raise UsageError(f"start point has {start.size} values, model dim is {model.dim}")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    if not 0.0 <= args.noise_scale <= 1.0:
        raise UsageError("--noise-scale must lie in [0, 1]")
    path = model.generate(start, args.steps, args.noise_scale, _rng(args, args.noise_scale))
    text = data_mod.format_dataset([Trajectory(path, model.dt)])
    _emit(text, args.out)
    return 0


def cmd_eval(args) -> int:
    model = load_model(_existing(args.model))
    dataset = data_mod.load(_existing(args.data))
    if dataset.dim != model.dim:
        raise UsageError(f"data dim {dataset.dim} does not match model dim {model.dim}")
    report = evaluate(model, dataset)
    print(report.to_table(), end="")
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def _label_of(data_path: Path, model_paths: list[Path]) -> int | None:
    stem = data_path.stem
    hits = [k for k, m in enumerate(model_paths) if stem.startswith(m.stem)]
    return max(hits, key=lambda k: len(model_paths[k].stem)) if hits else None


def cmd_classify(args) -> int:
    model_paths = [_existing(m) for m in args.models]
    data_paths = [_existing(d) for d in args.data]
    models = [load_model(m) for m in model_paths]
    labels = [_label_of(d, model_paths) for d in data_paths]
    n = len(models)
    confusion = np.zeros((n, n), dtype=int)
    lines = ["file traj predicted " + " ".join(f"loglik[{k}]" for k in range(n))]
    for dpath, label in zip(data_paths, labels):
        dataset = data_mod.load(dpath)
        for i, traj in enumerate(dataset):
            try:
                best, scores = classify(traj, models)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            lines.append(f"{dpath.name} {i} {best} " + " ".join(f"{s:.6f}" for s in scores))
            if label is not None:
                confusion[label, best] += 1
    if all(label is not None for label in labels):
        lines.append("# confusion (rows: true model, columns: predicted)")
        lines.extend("# " + " ".join(str(v) for v in row) for row in confusion)
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def parse_grid(spec: str, dim: int) -> tuple[list[float], list[float], list[int]]:
    parts = spec.split(",")
    if len(parts) != dim:
        raise UsageError(f"--grid needs {dim} comma-separated LO:HI:N entries")
    lo, hi, counts = [], [], []
    for part in parts:
        try:
            a, b, n = part.split(":")
            lo.append(float(a))
            hi.append(float(b))
            counts.append(int(n))
        except ValueError:
            raise UsageError(f"bad grid entry {part!r}; expected LO:HI:N") from None
        if counts[-1] < 1:
            raise UsageError("grid counts must be >= 1")
    return lo, hi, counts


def cmd_field(args) -> int:
    model = load_model(_existing(args.model))
    lo, hi, counts = parse_grid(args.grid, model.dim)
    pts = grid_points(lo, hi, counts)
    vel = model.vector_field(pts)
    _emit(format_vector_field(pts, vel, counts), args.out)
    return 0


def cmd_synth(args) -> int:
    if args.shape in data_mod.POINT_TO_POINT_SHAPES:
        ds = data_mod.synth_point_to_point(args.shape, args.demos, args.noise, args.seed)
    else:
        ds = data_mod.synth_limit_cycle(args.shape, args.demos, args.noise, args.seed)
    _emit(data_mod.format_dataset(ds), args.out)
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to demonstrations")
    p.add_argument("data")
    p.add_argument("--latent", choices=["linear", "cycle"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--smax", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int, help="number of (coupling, orthogonal) layer pairs")
    p.add_argument("--clip", type=float, help="gradient clip norm")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="roll out a trajectory from a start point")
    p.add_argument("model")
    p.add_argument("--start", type=float, nargs="+", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="metrics of expected reproductions against demos")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="assign each trajectory to its most likely model")
    p.add_argument("data", nargs="+")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("field", help="export the expected vector field on a grid")
    p.add_argument("model")
    p.add_argument("--grid", required=True, help="LO:HI:N per dimension, comma separated; use --grid=...")
    p.add_argument("--out")
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("synth", help="write a synthetic demonstration set")
    p.add_argument("shape", choices=[*data_mod.POINT_TO_POINT_SHAPES, *data_mod.CYCLE_SHAPES])
    p.add_argument("--demos", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("STOCHFLOW_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (UsageError, DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
