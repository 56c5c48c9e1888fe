"""Command-line driver.

    lcgnn cv      --dataset MUTAG --data-dir ./data --folds 10 --seed 1
    lcgnn ablate  --dataset MUTAG --axis beta --values 0.3,0.4,0.5
    lcgnn train   --dataset MUTAG --fold 0
    lcgnn fixture --out ./data --seed 0
    lcgnn replay  --manifest runs/cv_MUTAG_seed1/manifest.json
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data import load_dataset, make_fixture, stratified_kfold_split, write_tu_dataset
from .experiments import (
    AXES,
    AblationReport,
    run_ablation,
    run_cross_validation,
    run_fold,
    write_json,
    write_metrics_csv,
    write_rows_csv,
)
from .trainer import MODES, TrainingConfig

logger = logging.getLogger("lcgnn")

DEFAULTS = TrainingConfig()
CONFIG_FLAGS = {  # flag -> TrainingConfig field
    "beta": "beta",
    "alpha": "alpha",
    "tau": "tau",
    "lr": "lr",
    "lr-step": "lr_step",
    "lr-gamma": "lr_gamma",
    "batch": "batch_size",
    "dropout": "dropout",
    "epochs": "epochs",
    "hidden": "hidden",
    "layers": "layers",
    "folds": "folds",
    "seed": "seed",
    "mode": "mode",
    "normalize": "normalize",
}


class CLIError(Exception):
    pass


def _add_data_args(p):
    p.add_argument("--dataset", required=True, help="TU dataset name, e.g. MUTAG")
    p.add_argument(
        "--data-dir",
        default=os.environ.get("LCGNN_DATA_DIR", "data"),
        help="directory holding <dataset>/<dataset>_*.txt (default: $LCGNN_DATA_DIR or ./data)",
    )
    p.add_argument("--out", default=None, help="output directory (default: runs/<command>_<dataset>_seed<seed>)")
    p.add_argument("--workers", type=int, default=1, help="parallel fold workers (default: 1)")


def _add_config_args(p):
    d = DEFAULTS
    p.add_argument("--beta", type=float, default=d.beta,
                   help=f"weight of the label contrastive term; 0 disables its gradient (default: {d.beta})")
    p.add_argument("--alpha", type=float, default=d.alpha,
                   help=f"key-encoder momentum in [0, 1) (default: {d.alpha})")
    p.add_argument("--tau", type=float, default=d.tau, help=f"contrastive temperature (default: {d.tau})")
    p.add_argument("--lr", type=float, default=d.lr, help=f"Adam learning rate; tuning grid 0.01, 0.001 (default: {d.lr})")
    p.add_argument("--lr-step", type=int, default=d.lr_step,
                   help=f"multiply the learning rate by --lr-gamma every this many epochs; 0 disables (default: {d.lr_step})")
    p.add_argument("--lr-gamma", type=float, default=d.lr_gamma,
                   help=f"learning-rate decay factor (default: {d.lr_gamma})")
    p.add_argument("--batch", type=int, default=d.batch_size,
                   help=f"minibatch size; tuning grid 32, 128, 512 (default: {d.batch_size})")
    p.add_argument("--dropout", type=float, default=d.dropout,
                   help=f"dropout before the classifier; tuning grid 0.0, 0.5 (default: {d.dropout})")
    p.add_argument("--epochs", type=int, default=d.epochs, help=f"training epochs per fold (default: {d.epochs})")
    p.add_argument("--hidden", type=int, default=d.hidden, help=f"hidden width of every GIN layer (default: {d.hidden})")
    p.add_argument("--layers", type=int, default=d.layers, help=f"number of GIN layers (default: {d.layers})")
    p.add_argument("--folds", type=int, default=d.folds, help=f"cross-validation folds (default: {d.folds})")
    p.add_argument("--seed", type=int, default=d.seed, help=f"master random seed (default: {d.seed})")
    p.add_argument("--mode", choices=MODES, default=d.mode,
                   help=f"contrastive term: label-contrastive, infonce or none (default: {d.mode})")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=d.normalize,
                   help="unit-normalize queries and keys inside the contrastive term (default: on)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcgnn", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-fold progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_data_args(p)
    _add_config_args(p)

    p = sub.add_parser("train", help="train and evaluate a single fold")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--fold", type=int, default=0, help="fold index to run (default: 0)")

    p = sub.add_parser("ablate", help="sweep beta, momentum, loss mode or training ratio")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--axis", choices=AXES, required=True, help="what to sweep")
    p.add_argument("--values", default=None, help="comma-separated sweep points (default: the axis' standard grid)")
    p.add_argument("--ratios", default=None, help="training ratios for --axis train-ratio (alias of --values)")

    p = sub.add_parser("fixture", help="write the 8-graph synthetic TU dataset")
    p.add_argument("--out", default="data", help="parent directory (default: ./data)")
    p.add_argument("--name", default="FIXTURE", help="dataset name (default: FIXTURE)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")

    p = sub.add_parser("replay", help="rerun a recorded run from its manifest")
    p.add_argument("--manifest", required=True, help="path to manifest.json")
    p.add_argument("--out", default=None, help="output directory (default: <run dir>/replay)")
    return parser


def _config_from_args(args) -> TrainingConfig:
    return TrainingConfig(**{field: getattr(args, flag.replace("-", "_")) for flag, field in CONFIG_FLAGS.items()})


def _parse_values(args) -> list | None:
    raw = args.values if args.values is not None else args.ratios
    if raw is None:
        return None
    items = [tok.strip() for tok in raw.split(",") if tok.strip()]
    if not items:
        raise CLIError("--values is empty")
    if args.axis == "loss-mode":
        bad = [v for v in items if v not in MODES]
        if bad:
            raise CLIError(f"unknown loss mode(s) {bad}; choose from {MODES}")
        return items
    try:
        return [float(v) for v in items]
    except ValueError:
        raise CLIError(f"--values must be numbers for axis {args.axis}") from None


def _manifest(args, config: TrainingConfig, out: Path, extra: dict | None = None) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "dataset": args.dataset,
        "data_dir": str(Path(args.data_dir).resolve()),
        "out": str(out),
        "workers": args.workers,
        "seed": config.seed,
        "config": config.to_dict(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **(extra or {}),
    }


def _out_dir(args, config) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}_{args.dataset}_seed{config.seed}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_cv(args, config: TrainingConfig, out: Path) -> int:
    dataset = load_dataset(args.data_dir, args.dataset)
    write_json(out / "manifest.json", _manifest(args, config, out))
    result, runs = run_cross_validation(dataset, config, workers=args.workers, return_runs=True)
    for run in runs:
        write_metrics_csv(out / f"fold_{run.fold:02d}_metrics.csv", run.history)
    write_rows_csv(out / "mean_curve.csv", result.mean_curve)
    write_json(out / "summary.json", {"dataset": dataset.stats(), **result.to_dict()})
    print(f"{args.dataset}: {result}")
    return 0


def cmd_train(args, config: TrainingConfig, out: Path) -> int:
    dataset = load_dataset(args.data_dir, args.dataset)
    folds = stratified_kfold_split(dataset, config.folds, config.seed)
    if not 0 <= args.fold < len(folds):
        raise CLIError(f"--fold must lie in [0, {len(folds)})")
    write_json(out / "manifest.json", _manifest(args, config, out, {"fold": args.fold}))
    run = run_fold(dataset, folds[args.fold], config)
    write_metrics_csv(out / f"fold_{run.fold:02d}_metrics.csv", run.history)
    last = run.history[-1]
    summary = {
        "fold": run.fold,
        "n_train": run.n_train,
        "n_test": run.n_test,
        "final_test_acc": last.test_acc,
        "final_cls_loss": last.cls_loss,
        "best_test_acc": float(run.test_curve.max()),
        "config": config.to_dict(),
    }
    write_json(out / "summary.json", summary)
    print(f"{args.dataset} fold {run.fold}: final test acc {last.test_acc:.3f}")
    return 0


def cmd_ablate(args, config: TrainingConfig, out: Path) -> int:
    values = _parse_values(args)
    dataset = load_dataset(args.data_dir, args.dataset)
    write_json(out / "manifest.json", _manifest(args, config, out, {"axis": args.axis, "values": values}))
    report = run_ablation(dataset, config, args.axis, values, workers=args.workers)
    write_json(out / "summary.json", report.to_dict())
    if isinstance(report, AblationReport):
        write_rows_csv(out / "sweep.csv", report.rows())
        write_rows_csv(out / "curves.csv", report.curve_rows())
        for row in report.rows():
            print(f"{row['axis']}={row['value']}: {100 * row['mean']:.1f} ± {100 * row['std']:.1f}")
    else:
        write_rows_csv(out / "table.csv", report.table())
        for row in report.table():
            print(row["method"], " ".join(f"{k}:{100 * v:.1f}" for k, v in row.items() if k != "method"))
    return 0


def cmd_fixture(args) -> int:
    try:
        path = write_tu_dataset(make_fixture(args.seed, args.name), args.out, args.name)
    except OSError as exc:
        raise CLIError(f"cannot write fixture to {args.out}: {exc}") from None
    print(path)
    return 0


def cmd_replay(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text())
    out = Path(args.out) if args.out else manifest_path.parent / "replay"
    argv = [manifest["command"], "--dataset", manifest["dataset"], "--data-dir", manifest["data_dir"],
            "--out", str(out), "--workers", str(manifest.get("workers", 1))]
    for flag, field in CONFIG_FLAGS.items():
        value = manifest["config"][field]
        if isinstance(value, bool):
            argv.append(f"--{flag}" if value else f"--no-{flag}")
        else:
            argv += [f"--{flag}", str(value)]
    if manifest["command"] == "ablate":
        argv += ["--axis", manifest["axis"]]
        if manifest.get("values"):
            argv += ["--values", ",".join(str(v) for v in manifest["values"])]
    if manifest["command"] == "train":
        argv += ["--fold", str(manifest["fold"])]
    return main(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "fixture":
            return cmd_fixture(args)
        if args.command == "replay":
            return cmd_replay(args)
        try:
            config = _config_from_args(args)
        except ValueError as exc:
            parser.error(str(exc))
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        if args.command == "ablate":
            try:
                _parse_values(args)
            except CLIError as exc:
                parser.error(str(exc))
        out = _out_dir(args, config)
        handler = {"cv": cmd_cv, "train": cmd_train, "ablate": cmd_ablate}[args.command]
        return handler(args, config, out)
    except (CLIError, FileNotFoundError, ValueError) as exc:
        print(f"lcgnn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
