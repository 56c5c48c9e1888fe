"""Label-tagged memory bank and the contrastive losses computed against it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, constant, forward_primitive

__all__ = [
    "MemoryBank",
    "init_memory_bank",
    "replace_bank_entries",
    "contrastive_loss",
    "label_contrastive_loss_single",
    "label_contrastive_loss_batch",
    "infonce_loss",
    "infonce_loss_batch",
]


@dataclass
class MemoryBank:
    """One key vector per labeled training graph, overwritten as the key encoder evolves."""

    keys: np.ndarray  # (m, d)
    labels: np.ndarray  # (m,), read-only
    updated_epoch: np.ndarray  # (m,), -1 until first replacement

    @property
    def capacity(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def init_memory_bank(labels, dim: int, seed: int | np.random.Generator = 0) -> MemoryBank:
    """Bank with standard-normal random keys, one slot per entry of ``labels``."""
    labels = np.array(labels, dtype=np.int64).reshape(-1)
    if dim <= 0:
        raise ValueError(f"key dimension must be positive, got {dim}")
    if labels.size == 0:
        raise ValueError("memory bank needs at least one labeled graph")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels.setflags(write=False)
    return MemoryBank(
        keys=rng.standard_normal((labels.size, dim)),
        labels=labels,
        updated_epoch=np.full(labels.size, -1, dtype=np.int64),
    )


def replace_bank_entries(bank: MemoryBank, indices, keys, epoch: int = 0) -> MemoryBank:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    keys = keys.reshape(len(indices), -1)
    if len(np.unique(indices)) != len(indices):
        raise ValueError("duplicate slot index in a single bank replacement")
    if indices.size and (indices.min() < 0 or indices.max() >= bank.capacity):
        raise IndexError(f"slot index outside bank of capacity {bank.capacity}")
    if keys.shape[1] != bank.dim:
        raise ShapeError(f"key width {keys.shape[1]} != bank width {bank.dim}")
    if not np.isfinite(keys).all():
        raise ValueError("refusing to store non-finite keys in the memory bank")
    bank.keys[indices] = keys
    bank.updated_epoch[indices] = epoch
    return bank


def contrastive_loss(queries: Tensor, keys: np.ndarray, positive_mask: np.ndarray, tau: float) -> Tensor:
    """Mean over queries of ``-log(sum_pos exp(q.k/tau) / sum_all exp(q.k/tau))``.

    Keys are constants; gradients flow to ``queries`` only.  Both log-sums
    subtract their row maximum, so large logits cannot overflow.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if queries.shape[0] == 0:
        raise ValueError("contrastive loss over an empty batch")
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one key")
    positive_mask = np.asarray(positive_mask, dtype=bool)
    if not positive_mask.any(axis=1).all():
        raise ValueError("a query has no positive key; the loss is undefined")
    logits = forward_primitive("scale", [queries @ constant(keys.T)], factor=1.0 / tau)
    log_all = forward_primitive("logsumexp-rows", [logits])
    log_pos = forward_primitive("logsumexp-rows", [logits], mask=positive_mask)
    per_query = log_all - log_pos
    return forward_primitive("scale", [forward_primitive("sum", [per_query])], factor=1.0 / queries.shape[0])


def _as_rows(q) -> Tensor:
    q = q if isinstance(q, Tensor) else constant(q)
    if q.data.ndim == 1:
        raise ShapeError("pass queries as a (n, d) matrix; reshape single vectors to (1, d)")
    return q


def label_contrastive_loss_batch(queries, labels, bank: MemoryBank, tau: float) -> Tensor:
    queries = _as_rows(queries)
    labels = np.asarray(labels).reshape(-1)
    if queries.shape[0] != labels.size:
        raise ShapeError(f"{queries.shape[0]} queries but {labels.size} labels")
    mask = labels[:, None] == bank.labels[None, :]
    return contrastive_loss(queries, bank.keys, mask, tau)


def label_contrastive_loss_single(q, y: int, bank: MemoryBank, tau: float) -> Tensor:
    q = q if isinstance(q, Tensor) else constant(np.asarray(q, dtype=np.float64).reshape(1, -1))
    return label_contrastive_loss_batch(q, [y], bank, tau)


def infonce_loss_batch(queries, positive_slots, keys, tau: float) -> Tensor:
    """Single-positive loss; query ``i``'s positive is ``keys[positive_slots[i]]``."""
    queries = _as_rows(queries)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("InfoNCE needs a non-empty (m, d) key matrix")
    positive_slots = np.asarray(positive_slots, dtype=np.int64).reshape(-1)
    mask = np.zeros((queries.shape[0], keys.shape[0]), dtype=bool)
    mask[np.arange(queries.shape[0]), positive_slots] = True
    return contrastive_loss(queries, keys, mask, tau)


def infonce_loss(q, positive: int, keys, tau: float) -> Tensor:
    """InfoNCE for one query; ``positive`` indexes the positive row of ``keys``."""
    q = q if isinstance(q, Tensor) else constant(np.asarray(q, dtype=np.float64).reshape(1, -1))
    return infonce_loss_batch(q, [positive], keys, tau)
