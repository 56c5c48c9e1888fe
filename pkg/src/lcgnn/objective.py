"""Logistic-regression head, classification loss and the mixed objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, constant, forward_primitive

__all__ = [
    "ClassifierParams",
    "classifier_log_proba",
    "classifier_forward",
    "classification_loss",
    "cross_entropy_loss",
    "mixed_loss",
]

PROBA_FLOOR = 1e-12


@dataclass
class ClassifierParams:
    weight: Parameter  # (C, D)
    bias: Parameter  # (C,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    @classmethod
    def init(cls, input_dim: int, num_classes: int, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(input_dim)
        return cls(
            weight=Parameter(rng.uniform(-bound, bound, (num_classes, input_dim)), name="clf.weight"),
            bias=Parameter(rng.uniform(-bound, bound, num_classes), name="clf.bias"),
        )


def classifier_log_proba(
    params: ClassifierParams,
    q: Tensor,
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Row-wise log softmax(W q + b); dropout hits ``q`` in training mode only."""
    if q.shape[-1] != params.input_dim:
        raise ShapeError(f"classifier expects width {params.input_dim}, got {q.shape[-1]}")
    q = forward_primitive("dropout", [q], rate=dropout, training=training, rng=rng)
    logits = q @ params.weight.T + params.bias
    return forward_primitive("log-softmax-rows", [logits])


def classifier_forward(params, q, training=False, dropout=0.0, rng=None) -> np.ndarray:
    """Class probabilities for each row of ``q``."""
    q = q if isinstance(q, Tensor) else constant(np.atleast_2d(q))
    return np.exp(classifier_log_proba(params, q, training, dropout, rng).data)


def classification_loss(log_proba: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes, on the tape."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = log_proba.shape
    if labels.size != n:
        raise ShapeError(f"{n} predictions but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = forward_primitive("sum", [log_proba * constant(onehot)])
    return forward_primitive("scale", [picked], factor=-1.0 / n)


def cross_entropy_loss(predictions, labels) -> float:
    """Mean -log p[true class] for externally supplied probability rows.

    Probabilities are floored at 1e-12 so the result stays finite.
    """
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape[0] != labels.size:
        raise ShapeError(f"{p.shape[0]} predictions but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("each prediction row must be a probability distribution")
    picked = np.maximum(p[np.arange(labels.size), labels], PROBA_FLOOR)
    return float(-np.log(picked).mean())


def mixed_loss(cls_loss, lc_loss, beta: float):
    """cls_loss + beta * lc_loss, for floats or tape tensors."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if isinstance(cls_loss, Tensor) or isinstance(lc_loss, Tensor):
        return cls_loss + lc_loss * float(beta)
    return cls_loss + beta * lc_loss
