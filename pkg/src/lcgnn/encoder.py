"""GIN graph encoder and the momentum-updated key copy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, constant, forward_primitive
from .data import Graph

__all__ = [
    "GinLayerParams",
    "GinEncoderParams",
    "GraphBatch",
    "gin_layer_forward",
    "graph_readout",
    "encode_batch",
    "encode_graph",
    "init_encoders",
    "momentum_update",
]


@dataclass
class GinLayerParams:
    """``MLP((1 + eps) * h_v + sum of neighbor h_u)`` with a two-layer MLP."""

    eps: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.eps, self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str = ""):
        def uniform(fan_in, shape, name):
            bound = 1.0 / np.sqrt(fan_in)
            return Parameter(rng.uniform(-bound, bound, size=shape), name=prefix + name)

        return cls(
            eps=Parameter(np.zeros(1), name=prefix + "eps"),
            w1=uniform(in_dim, (in_dim, out_dim), "w1"),
            b1=uniform(in_dim, (out_dim,), "b1"),
            w2=uniform(out_dim, (out_dim, out_dim), "w2"),
            b2=uniform(out_dim, (out_dim,), "b2"),
        )


@dataclass
class GinEncoderParams:
    layers: list[GinLayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].out_dim

    @property
    def output_dim(self) -> int:
        return sum(layer.out_dim for layer in self.layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def copy(self) -> "GinEncoderParams":
        return GinEncoderParams(
            [
                GinLayerParams(*(p.copy() for p in layer.parameters()))
                for layer in self.layers
            ]
        )


def _padded_index(lists: Sequence[np.ndarray]) -> np.ndarray:
    """Stack ragged integer lists into a -1 padded matrix."""
    lengths = np.array([len(x) for x in lists], dtype=np.int64)
    width = max(int(lengths.max(initial=0)), 1)
    out = np.full((len(lists), width), -1, dtype=np.int64)
    if lengths.sum():
        rows = np.repeat(np.arange(len(lists)), lengths)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        cols = np.arange(lengths.sum()) - np.repeat(starts, lengths)
        out[rows, cols] = np.concatenate([x for x in lists if len(x)])
    return out


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs, laid out for segment sums."""

    features: np.ndarray  # (total nodes, feature dim)
    neighbor_index: np.ndarray  # (total nodes, max degree), -1 padded
    node_index: np.ndarray  # (graphs, max nodes), -1 padded

    @property
    def num_graphs(self) -> int:
        return self.node_index.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        nbr_lists, node_lists, feats = [], [], []
        offset = 0
        for g in graphs:
            if g.features is None:
                raise ValueError("graph has no node features; apply degree_onehot_features first")
            nbr_lists.extend(n + offset for n in g.neighbors())
            node_lists.append(np.arange(offset, offset + g.num_nodes))
            feats.append(g.features)
            offset += g.num_nodes
        return cls(
            features=np.vstack(feats),
            neighbor_index=_padded_index(nbr_lists),
            node_index=_padded_index(node_lists),
        )


def gin_layer_forward(
    layer: GinLayerParams, h: Tensor, neighbor_index: np.ndarray, exact: bool = True
) -> Tensor:
    if h.shape[0] != neighbor_index.shape[0]:
        raise ShapeError(
            f"gin layer: {h.shape[0]} embedding rows for {neighbor_index.shape[0]} nodes"
        )
    if h.shape[1] != layer.in_dim:
        raise ShapeError(f"gin layer: expected width {layer.in_dim}, got {h.shape[1]}")
    neighbor_sum = forward_primitive("segment-sum", [h], index=neighbor_index, exact=exact)
    combined = h * (layer.eps + 1.0) + neighbor_sum
    hidden = forward_primitive("matmul", [combined, layer.w1], exact=exact) + layer.b1
    hidden = forward_primitive("relu", [hidden])
    return forward_primitive("matmul", [hidden, layer.w2], exact=exact) + layer.b2


def graph_readout(
    layer_outputs: Sequence[Tensor], node_index: np.ndarray | None = None, exact: bool = True
) -> Tensor:
    """Concatenate per-layer node sums.

    Without ``node_index`` all rows belong to one graph and a (1, K*d) row is
    returned; otherwise one row per graph.
    """
    if not layer_outputs:
        raise ValueError("readout needs at least one layer output")
    if node_index is None:
        pooled = [forward_primitive("sum-rows", [h]) for h in layer_outputs]
    else:
        pooled = [forward_primitive("segment-sum", [h], index=node_index, exact=exact) for h in layer_outputs]
    return forward_primitive("concat", pooled)


def encode_batch(params: GinEncoderParams, batch: GraphBatch, exact: bool = False) -> Tensor:
    """Representations for every graph in ``batch``, shape (graphs, K*hidden).

    The default fast path uses BLAS, whose rounding can depend on a row's
    position in the batch; pass ``exact=True`` for order-independent sums.
    """
    if batch.features.shape[1] != params.input_dim:
        raise ShapeError(
            f"feature width {batch.features.shape[1]} != encoder input {params.input_dim}"
        )
    h = constant(batch.features)
    outputs = []
    for layer in params.layers:
        h = gin_layer_forward(layer, h, batch.neighbor_index, exact)
        outputs.append(h)
    return graph_readout(outputs, batch.node_index, exact)


def encode_graph(params: GinEncoderParams, g: Graph, training: bool = False) -> Tensor:
    """Representation of one graph as a (1, K*hidden) row.

    ``training`` is accepted for symmetry with the classifier; the encoder has
    no train-time-only behavior.
    """
    batch = GraphBatch.from_graphs([g])
    h = constant(batch.features)
    outputs = []
    for layer in params.layers:
        h = gin_layer_forward(layer, h, batch.neighbor_index)
        outputs.append(h)
    return graph_readout(outputs)


def init_encoders(
    input_dim: int, hidden_dim: int = 64, num_layers: int = 3, seed: int | np.random.Generator = 0
) -> tuple[GinEncoderParams, GinEncoderParams]:
    """Fresh query encoder and an exact deep copy of it as the key encoder."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    width = input_dim
    for k in range(num_layers):
        layers.append(GinLayerParams.init(width, hidden_dim, rng, prefix=f"gin{k}."))
        width = hidden_dim
    query = GinEncoderParams(layers)
    return query, query.copy()


def momentum_update(key: GinEncoderParams, query: GinEncoderParams, alpha: float) -> GinEncoderParams:
    """In place: key <- alpha * key + (1 - alpha) * query.

    Evaluated as ``query + alpha * (key - query)`` so that alpha = 0 and
    key == query both give the query values exactly.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"momentum alpha must lie in [0, 1), got {alpha}")
    key_params, query_params = key.parameters(), query.parameters()
    if len(key_params) != len(query_params):
        raise ShapeError("key and query encoders have different structure")
    for pk, pq in zip(key_params, query_params):
        if pk.shape != pq.shape:
            raise ShapeError(f"momentum update: shapes {pk.shape} and {pq.shape} differ")
        pk.data[...] = pq.data + alpha * (pk.data - pq.data)
    return key
