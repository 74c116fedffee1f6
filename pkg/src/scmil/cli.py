"""Command line entry point: ``scmil generate|train|eval|sweep``.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure,
3 sweep finished with at least one failed cell.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, save_config
from .data import DataError, class_counts, load_dataset, save_dataset
from .evaluation import evaluate
from .experiment import make_splits
from .model import load_checkpoint, save_checkpoint
from .sweep import load_sweep, run_sweep
from .train import TrainingDiverged, train

log = logging.getLogger("scmil")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed, init_seed=args.seed, sample_seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _config(args)
    splits = make_splits(cfg)
    out = _out_dir(args)
    save_dataset(out, splits, {"config": cfg.to_dict(), "config_hash": cfg.config_hash()})
    for name, slides in splits.items():
        counts = "/".join(str(c) for c in class_counts(slides, cfg.n_classes))
        print(f"{name}: {len(slides)} slides, per-class {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        splits, _ = load_dataset(args.data, ["train", "val"])
    else:
        splits = make_splits(cfg)
    out = _out_dir(args)

    def progress(step, _params):
        if not args.quiet and (step + 1) % 500 == 0:
            log.info("step %d/%d", step + 1, cfg.steps)

    params, history = train(cfg, splits["train"], splits.get("val"), on_step=progress)
    save_checkpoint(out / "checkpoint.json", params, cfg.to_dict())
    history.write_csv(out / "history.csv")
    save_config(out / "config.json", cfg)
    if not args.quiet:
        last = history.loss[-1] if len(history) else float("nan")
        print(f"trained {cfg.method} for {cfg.steps} steps, final loss {last:.6f}")
        print(f"wrote {out / 'checkpoint.json'} and {out / 'history.csv'}")
    return EXIT_OK


def append_metrics_row(path: Path, row: dict) -> None:
    exists = path.exists() and path.stat().st_size > 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        if not exists:
            w.writeheader()
        w.writerow(row)


def metrics_row(report, seed: int, config_hash: str) -> dict:
    row = {"method": report.method, "rho": report.rho, "split": report.split,
           "f1": repr(report.f1), "auc": repr(report.auc)}
    for j, v in enumerate(report.per_class_f1):
        row[f"f1_class{j}"] = repr(v)
    row["seed"] = seed
    row["config_hash"] = config_hash
    return row


def cmd_eval(args) -> int:
    params, cfg_dict = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(cfg_dict) if cfg_dict else ExperimentConfig()
    splits, _ = load_dataset(args.data, [args.split])
    slides = splits[args.split]
    d_in = slides[0].instances.shape[1]
    if d_in != params.dims.d_in:
        raise DataError(f"dataset has d_in={d_in} but checkpoint expects {params.dims.d_in}")
    if max(s.label for s in slides) >= params.dims.n_classes:
        raise DataError("dataset labels exceed the checkpoint's class count")
    report = evaluate(slides, params, cfg.bag_size, cfg.eval_seed,
                      split=args.split, rho=cfg.rho, method=cfg.method)
    out = Path(args.out)
    if out.is_dir():
        out = out / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    append_metrics_row(out, metrics_row(report, cfg.init_seed, cfg.config_hash()))
    if not args.quiet:
        print(f"{cfg.method} rho={cfg.rho} {args.split}: F1 {report.f1:.2f}  AUC {report.auc:.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_sweep(args.config)
    if args.seed is not None:
        spec = spec.with_base(spec.base.replace(data_seed=args.seed, init_seed=args.seed,
                                                sample_seed=args.seed))
    out = _out_dir(args)
    result = run_sweep(spec, out, jobs=args.jobs, verbose=not args.quiet)
    if not args.quiet:
        for path in result.files:
            print(f"wrote {path}")
    if result.failed:
        print(f"{result.failed} of {result.total} cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scmil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override data/init/sampling seeds")
        sp.add_argument("--quiet", action="store_true")

    g = sub.add_parser("generate", help="write train/val/test/ood dataset files")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--data", help="dataset directory from `generate` (default: generate in memory)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="metrics CSV file (appended) or directory")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a method x ratio x seed sweep")
    common(s, config_required=True)
    s.add_argument("--jobs", type=int, default=1, help="cells to run in parallel")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
