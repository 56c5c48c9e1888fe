"""Input checks shared by the estimator and the experiment drivers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Graph, GraphDataset


def check_graphs(X, y=None, feature_dim: int | None = None):
    """Validate a graph collection and return ``(list_of_graphs, labels)``.

    ``X`` may be a GraphDataset or any sequence of Graph objects.  When ``y``
    is omitted the graphs' own labels are used.
    """
    graphs = list(X.graphs) if isinstance(X, GraphDataset) else list(X)
    if not graphs:
        raise ValueError("expected at least one graph")
    for i, g in enumerate(graphs):
        if not isinstance(g, Graph):
            raise TypeError(f"item {i} is {type(g).__name__}, expected Graph")
        if g.features is None:
            raise ValueError(
                f"graph {i} has no node features; apply degree_onehot_features first"
            )
    dims = {g.features.shape[1] for g in graphs}
    if len(dims) != 1:
        raise ValueError(f"node feature widths differ across graphs: {sorted(dims)}")
    if feature_dim is not None and dims != {feature_dim}:
        raise ValueError(f"fitted on feature width {feature_dim}, got {dims.pop()}")
    if y is None:
        y = np.array([g.label for g in graphs])
    else:
        y = np.asarray(y).reshape(-1)
        if y.size != len(graphs):
            raise ValueError(f"{len(graphs)} graphs but {y.size} labels")
    return graphs, y


def check_indices(indices: Sequence[int], n: int, name: str = "indices") -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{name} out of range for {n} graphs")
    return idx
