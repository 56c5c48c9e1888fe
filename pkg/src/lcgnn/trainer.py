"""The mixed-loss training loop: key encoding, bank refresh, query step, momentum."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, Tape, backward, forward_primitive
from .contrastive import (
    MemoryBank,
    infonce_loss_batch,
    init_memory_bank,
    label_contrastive_loss_batch,
    replace_bank_entries,
)
from .data import Graph, make_minibatches
from .encoder import GinEncoderParams, GraphBatch, encode_batch, init_encoders, momentum_update
from .objective import ClassifierParams, classification_loss, classifier_log_proba, mixed_loss

logger = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "BATCH_GRID",
    "LR_GRID",
    "DROPOUT_GRID",
    "TrainingConfig",
    "EpochMetrics",
    "TrainState",
    "TrainingDivergedError",
    "init_state",
    "batch_losses",
    "train_epoch",
    "predict_log_proba",
]

MODES = ("label-contrastive", "infonce", "none")

# tuning grids used for each dataset
BATCH_GRID = (32, 128, 512)
LR_GRID = (0.01, 0.001)
DROPOUT_GRID = (0.0, 0.5)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 0.5
    alpha: float = 0.9
    tau: float = 0.07
    lr: float = 0.01
    lr_step: int = 50  # halve the learning rate every lr_step epochs; 0 keeps it constant
    lr_gamma: float = 0.5
    batch_size: int = 32
    dropout: float = 0.5
    epochs: int = 300
    hidden: int = 64
    layers: int = 3
    folds: int = 10
    seed: int = 0
    mode: str = "label-contrastive"
    normalize: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.lr_step < 0:
            raise ValueError(f"lr_step must be >= 0, got {self.lr_step}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("epochs", "hidden", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_step == 0:
            return self.lr
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)

    @property
    def uses_contrast(self) -> bool:
        return self.mode != "none"

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    cls_loss: float
    lc_loss: float
    train_acc: float
    test_acc: float = float("nan")


@dataclass
class TrainState:
    encoder_q: GinEncoderParams
    encoder_k: GinEncoderParams
    classifier: ClassifierParams
    bank: MemoryBank
    optimizer: Adam
    rng: np.random.Generator  # dropout stream
    epoch: int = 0
    bank_labels: np.ndarray = field(default=None, repr=False)

    def check_registry(self) -> None:
        """The key encoder must never be handed to the optimizer."""
        for p in self.encoder_k.parameters():
            if self.optimizer.owns(p):
                raise RuntimeError(f"key-encoder parameter {p.name} is registered with the optimizer")


def _seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("encoder", "classifier", "bank", "dropout")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def init_state(input_dim: int, labels, num_classes: int, config: TrainingConfig) -> TrainState:
    """Fresh encoders (query and identical key copy), classifier, bank and optimizer."""
    streams = _seed_streams(config.seed)
    encoder_q, encoder_k = init_encoders(input_dim, config.hidden, config.layers, streams["encoder"])
    classifier = ClassifierParams.init(encoder_q.output_dim, num_classes, streams["classifier"])
    bank = init_memory_bank(labels, encoder_q.output_dim, streams["bank"])
    if config.normalize:
        bank.keys /= np.linalg.norm(bank.keys, axis=1, keepdims=True)
    # lr = 0 is allowed for forward-only checks; the optimizer is then never stepped
    optimizer = Adam(encoder_q.parameters() + classifier.parameters(), lr=config.lr or 1.0)
    state = TrainState(encoder_q, encoder_k, classifier, bank, optimizer, streams["dropout"])
    state.bank_labels = bank.labels.copy()
    return state


def batch_losses(state, batch, slots, labels, config, training=True, rng=None):
    queries = encode_batch(state.encoder_q, batch)
    log_proba = classifier_log_proba(
        state.classifier, queries, training=training, dropout=config.dropout, rng=rng
    )
    cls_loss = classification_loss(log_proba, labels)
    contrast_q = queries
    if config.normalize and config.uses_contrast:
        contrast_q = forward_primitive("l2-normalize-rows", [queries])
    if config.mode == "label-contrastive":
        lc_loss = label_contrastive_loss_batch(contrast_q, labels, state.bank, config.tau)
    elif config.mode == "infonce":
        lc_loss = infonce_loss_batch(contrast_q, slots, state.bank.keys, config.tau)
    else:
        lc_loss = None
    total = cls_loss if lc_loss is None else mixed_loss(cls_loss, lc_loss, config.beta)
    return total, cls_loss, lc_loss, log_proba


def train_epoch(
    state: TrainState,
    graphs: Sequence[Graph],
    labels,
    config: TrainingConfig,
) -> EpochMetrics:
    """One pass over the training graphs; slot ``i`` of the bank belongs to ``graphs[i]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if state.bank.capacity != len(graphs):
        raise ValueError(f"bank holds {state.bank.capacity} slots for {len(graphs)} training graphs")
    state.check_registry()

    epoch = state.epoch
    if config.lr > 0:
        state.optimizer.lr = config.lr_at(epoch)
    cls_total = lc_total = 0.0
    correct = 0
    batches = make_minibatches(np.arange(len(graphs)), config.batch_size, config.seed, epoch)
    for b, slots in enumerate(batches):
        batch = GraphBatch.from_graphs([graphs[i] for i in slots])
        y = labels[slots]

        try:
            if config.uses_contrast:
                keys = encode_batch(state.encoder_k, batch)
                if config.normalize:
                    keys = forward_primitive("l2-normalize-rows", [keys])
                replace_bank_entries(state.bank, slots, keys, epoch)
            with Tape() as tape:
                total, cls_loss, lc_loss, log_proba = batch_losses(
                    state, batch, slots, y, config, training=True, rng=state.rng
                )
        except NonFiniteError as exc:
            raise TrainingDivergedError(
                f"epoch {epoch} batch {b}: cls_loss=nan lc_loss=nan ({exc})"
            ) from exc
        cls_value = cls_loss.item()
        lc_value = 0.0 if lc_loss is None else lc_loss.item()
        if not (np.isfinite(cls_value) and np.isfinite(lc_value) and np.isfinite(total.item())):
            raise TrainingDivergedError(
                f"epoch {epoch} batch {b}: cls_loss={cls_value} lc_loss={lc_value}"
            )

        state.optimizer.zero_grad()
        backward(tape, total)
        if config.lr > 0:
            state.optimizer.step()
        if config.uses_contrast:
            momentum_update(state.encoder_k, state.encoder_q, config.alpha)

        cls_total += cls_value
        lc_total += lc_value
        correct += int((log_proba.data.argmax(axis=1) == y).sum())

    if not np.array_equal(state.bank.labels, state.bank_labels):
        raise RuntimeError("memory bank labels changed during training")
    state.epoch += 1
    return EpochMetrics(
        epoch=epoch,
        cls_loss=cls_total / len(batches),
        lc_loss=lc_total / len(batches),
        train_acc=correct / len(graphs),
    )


def predict_log_proba(state: TrainState, graphs: Sequence[Graph], chunk: int = 512) -> np.ndarray:
    """Eval-mode (no dropout) class log-probabilities from the query encoder."""
    out = []
    for start in range(0, len(graphs), chunk):
        batch = GraphBatch.from_graphs(list(graphs[start : start + chunk]))
        queries = encode_batch(state.encoder_q, batch)
        out.append(classifier_log_proba(state.classifier, queries, training=False).data)
    return np.vstack(out)


def embed(state: TrainState, graphs: Sequence[Graph], chunk: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(graphs), chunk):
        batch = GraphBatch.from_graphs(list(graphs[start : start + chunk]))
        out.append(encode_batch(state.encoder_q, batch).data)
    return np.vstack(out)
