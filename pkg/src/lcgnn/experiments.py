"""Cross-validation and the experiment designs built on top of it.

Epoch selection follows the GIN protocol: for a config, every fold records its
test accuracy after each epoch, the per-epoch mean across folds is formed, and
the epoch maximizing that mean is reported.  This is optimistic by
construction; ``CVResult.selection`` says so in every report.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import FoldSplit, GraphDataset, stratified_kfold_split, subsample_training_set
from .estimator import LCGNNClassifier
from .trainer import EpochMetrics, TrainingConfig

logger = logging.getLogger(__name__)

__all__ = [
    "FoldRun",
    "CVResult",
    "LessDataReport",
    "AblationReport",
    "DEFAULT_RATIOS",
    "DEFAULT_BETAS",
    "DEFAULT_ALPHAS",
    "LOSS_MODES",
    "fold_seed",
    "run_fold",
    "run_cross_validation",
    "run_less_data_experiment",
    "run_ablation",
    "write_metrics_csv",
    "write_json",
]

DEFAULT_RATIOS = (0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_BETAS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_ALPHAS = (0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.99)
LOSS_MODES = ("label-contrastive", "infonce", "none")
SELECTION_RULE = "epoch maximizing the mean test accuracy across folds (GIN protocol)"
METRIC_COLUMNS = ("epoch", "cls_loss", "lc_loss", "train_acc", "test_acc")


@dataclass
class FoldRun:
    fold: int
    n_train: int
    n_test: int
    history: list[EpochMetrics]

    @property
    def test_curve(self) -> np.ndarray:
        return np.array([m.test_acc for m in self.history])


@dataclass
class CVResult:
    fold_accuracies: list[float]
    mean: float
    std: float
    selected_epoch: int
    final_accuracies: list[float]
    final_cls_loss: float
    config: dict
    selection: str = SELECTION_RULE
    mean_curve: list[dict] = field(default_factory=list, repr=False)

    @classmethod
    def from_runs(cls, runs: Sequence[FoldRun], config: TrainingConfig) -> "CVResult":
        curves = np.vstack([r.test_curve for r in runs])  # (folds, epochs)
        mean_curve = curves.mean(axis=0)
        best = int(np.argmax(mean_curve))
        accs = curves[:, best]
        fields = ("cls_loss", "lc_loss", "train_acc", "test_acc")
        per_epoch = [
            {"epoch": e, **{f: float(np.mean([getattr(r.history[e], f) for r in runs])) for f in fields}}
            for e in range(curves.shape[1])
        ]
        return cls(
            fold_accuracies=[float(a) for a in accs],
            mean=float(accs.mean()),
            std=float(accs.std()),
            selected_epoch=best,
            final_accuracies=[float(a) for a in curves[:, -1]],
            final_cls_loss=float(np.mean([r.history[-1].cls_loss for r in runs])),
            config=config.to_dict(),
            mean_curve=per_epoch,
        )

    def to_dict(self, with_curve: bool = False) -> dict:
        out = asdict(self)
        if not with_curve:
            out.pop("mean_curve")
        return out

    def __str__(self):
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f} (epoch {self.selected_epoch})"


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(
    dataset: GraphDataset,
    fold: FoldSplit,
    config: TrainingConfig,
    train_indices: Sequence[int] | None = None,
) -> FoldRun:
    """Train from scratch on one fold's training graphs and track test accuracy per epoch.

    ``train_indices`` overrides ``fold.train`` (used for reduced-label runs);
    the test set is always ``fold.test``.
    """
    train = np.asarray(fold.train if train_indices is None else train_indices)
    if np.intersect1d(train, fold.test).size:
        raise ValueError(f"fold {fold.fold}: train and test indices overlap")
    graphs = dataset.graphs
    model = LCGNNClassifier.from_config(config.replace(seed=fold_seed(config.seed, fold.fold)))
    model.fit(
        [graphs[i] for i in train],
        eval_set=([graphs[i] for i in fold.test], dataset.labels[fold.test]),
    )
    return FoldRun(fold.fold, len(train), len(fold.test), model.history_)


def _run_folds(dataset, folds, config, train_sets, workers) -> list[FoldRun]:
    jobs = [(dataset, f, config, t) for f, t in zip(folds, train_sets)]
    if workers == 1:
        runs = [run_fold(*job) for job in jobs]
    else:
        runs = Parallel(n_jobs=workers)(delayed(run_fold)(*job) for job in jobs)
    for run in runs:
        logger.info("fold %d: final test acc %.3f", run.fold, run.history[-1].test_acc)
    return runs


def run_cross_validation(
    dataset: GraphDataset,
    config: TrainingConfig,
    workers: int = 1,
    train_ratio: float = 1.0,
    return_runs: bool = False,
):
    """k-fold CV with ``config.folds`` stratified folds.

    With ``train_ratio < 1`` each fold's training set is subsampled per class
    before training; test sets are unchanged.
    """
    folds = stratified_kfold_split(dataset, config.folds, config.seed)
    labels = dataset.labels
    train_sets = [
        subsample_training_set(
            f.train, labels, train_ratio,
            seed=int(np.random.SeedSequence([config.seed, f.fold, 7919]).generate_state(1)[0]),
        )
        for f in folds
    ]
    runs = _run_folds(dataset, folds, config, train_sets, workers)
    result = CVResult.from_runs(runs, config)
    return (result, runs) if return_runs else result


@dataclass
class LessDataReport:
    """Accuracy grid: one row per method, one column per training ratio."""

    ratios: list[float]
    methods: dict[str, dict]  # method -> config snapshot
    results: dict[str, dict[float, CVResult]]

    def table(self) -> list[dict]:
        rows = []
        for method, by_ratio in self.results.items():
            row = {"method": method}
            for r in self.ratios:
                row[f"{r:g}"] = by_ratio[r].mean
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            "ratios": self.ratios,
            "methods": self.methods,
            "table": self.table(),
            "results": {
                m: {f"{r:g}": res.to_dict() for r, res in by_ratio.items()}
                for m, by_ratio in self.results.items()
            },
        }


def run_less_data_experiment(
    dataset: GraphDataset,
    config: TrainingConfig,
    ratios: Iterable[float] = DEFAULT_RATIOS,
    workers: int = 1,
) -> LessDataReport:
    """Compare plain GIN (no contrastive term) with the full model at each training ratio."""
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("no training ratios given")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"training ratio must lie in (0, 1], got {r}")
    methods = {
        "GIN": config.replace(mode="none", beta=0.0),
        "LCGNN": config,
    }
    results = {
        name: {r: run_cross_validation(dataset, cfg, workers, train_ratio=r) for r in ratios}
        for name, cfg in methods.items()
    }
    return LessDataReport(ratios, {k: v.to_dict() for k, v in methods.items()}, results)


@dataclass
class AblationReport:
    axis: str
    values: list
    results: list[CVResult]

    def rows(self) -> list[dict]:
        return [
            {
                "axis": self.axis,
                "value": v,
                "mean": r.mean,
                "std": r.std,
                "selected_epoch": r.selected_epoch,
                "final_cls_loss": r.final_cls_loss,
            }
            for v, r in zip(self.values, self.results)
        ]

    def curve_rows(self) -> list[dict]:
        return [
            {"value": v, **point}
            for v, r in zip(self.values, self.results)
            for point in r.mean_curve
        ]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "rows": self.rows(),
            "results": [r.to_dict() for r in self.results],
        }


AXES = ("beta", "momentum", "loss-mode", "train-ratio")


def run_ablation(
    dataset: GraphDataset,
    config: TrainingConfig,
    axis: str,
    values: Sequence | None = None,
    workers: int = 1,
):
    """Sweep one knob with everything else (seed included) fixed.

    ``train-ratio`` returns a :class:`LessDataReport`; the other axes an
    :class:`AblationReport`.
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if values is not None and len(values) == 0:
        raise ValueError("empty sweep")
    if axis == "train-ratio":
        return run_less_data_experiment(dataset, config, values or DEFAULT_RATIOS, workers)
    if axis == "beta":
        values = [float(v) for v in (values or DEFAULT_BETAS)]
        configs = [config.replace(beta=v) for v in values]
    elif axis == "momentum":
        values = [float(v) for v in (values or DEFAULT_ALPHAS)]
        configs = [config.replace(alpha=v) for v in values]
    else:
        values = list(values or LOSS_MODES)
        configs = [
            config.replace(mode=v, beta=0.0) if v == "none" else config.replace(mode=v)
            for v in values
        ]
    results = [run_cross_validation(dataset, c, workers) for c in configs]
    return AblationReport(axis, values, results)


# --------------------------------------------------------------------------
# output files


def write_metrics_csv(path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for m in history:
            writer.writerow([m.epoch, repr(m.cls_loss), repr(m.lc_loss), repr(m.train_acc), repr(m.test_acc)])


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
