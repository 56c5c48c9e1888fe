"""scikit-learn style classifier over lists of :class:`~lcgnn.data.Graph`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .trainer import (
    EpochMetrics,
    TrainingConfig,
    embed,
    init_state,
    predict_log_proba,
    train_epoch,
)
from .validation import check_graphs


class LCGNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """GIN encoder + logistic regression trained with a mixed
    cross-entropy / label-contrastive loss.

    ``transform`` returns the query-encoder graph representations.

    Parameters mirror :class:`~lcgnn.trainer.TrainingConfig`; ``mode`` is one
    of ``"label-contrastive"``, ``"infonce"`` or ``"none"``.  With
    ``normalize`` (default) queries and bank keys are scaled to unit length
    before the contrastive dot products; the classifier always sees the raw
    representation.
    """

    def __init__(
        self,
        beta=0.5,
        alpha=0.9,
        tau=0.07,
        lr=0.01,
        lr_step=50,
        lr_gamma=0.5,
        batch_size=32,
        dropout=0.5,
        epochs=300,
        hidden=64,
        layers=3,
        seed=0,
        mode="label-contrastive",
        normalize=True,
    ):
        self.beta = beta
        self.alpha = alpha
        self.tau = tau
        self.lr = lr
        self.lr_step = lr_step
        self.lr_gamma = lr_gamma
        self.batch_size = batch_size
        self.dropout = dropout
        self.epochs = epochs
        self.hidden = hidden
        self.layers = layers
        self.seed = seed
        self.mode = mode
        self.normalize = normalize

    def _config(self) -> TrainingConfig:
        return TrainingConfig(**self.get_params())

    @classmethod
    def from_config(cls, config: TrainingConfig) -> "LCGNNClassifier":
        params = config.to_dict()
        params.pop("folds")
        return cls(**params)

    def fit(self, X, y=None, eval_set=None):
        """Train on graphs ``X``.

        eval_set : optional ``(graphs, labels)``; its accuracy is recorded in
            ``history_`` after every epoch.
        """
        config = self._config()
        graphs, y = check_graphs(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = graphs[0].features.shape[1]

        eval_graphs = eval_y = None
        if eval_set is not None:
            eval_graphs, eval_y = check_graphs(*eval_set, feature_dim=self.n_features_in_)

        self.state_ = init_state(self.n_features_in_, y_idx, len(self.classes_), config)
        self.history_: list[EpochMetrics] = []
        for _ in range(config.epochs):
            metrics = train_epoch(self.state_, graphs, y_idx, config)
            if eval_graphs is not None:
                pred = self.classes_[predict_log_proba(self.state_, eval_graphs).argmax(axis=1)]
                metrics = EpochMetrics(
                    metrics.epoch, metrics.cls_loss, metrics.lc_loss,
                    metrics.train_acc, float(np.mean(pred == eval_y)),
                )
            self.history_.append(metrics)
        return self

    def predict_log_proba(self, X):
        check_is_fitted(self, "state_")
        graphs, _ = check_graphs(X, feature_dim=self.n_features_in_)
        return predict_log_proba(self.state_, graphs)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        log_proba = self.predict_log_proba(X)
        return self.classes_[log_proba.argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "state_")
        graphs, _ = check_graphs(X, feature_dim=self.n_features_in_)
        return embed(self.state_, graphs)
