"""TU-format graph datasets, fold construction and minibatching."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Graph",
    "GraphDataset",
    "FoldSplit",
    "TUFormatError",
    "parse_tu_dataset",
    "write_tu_dataset",
    "degree_onehot_features",
    "stratified_kfold_split",
    "subsample_training_set",
    "make_minibatches",
    "make_fixture",
    "load_dataset",
]


class TUFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """One labeled graph. ``edges`` holds each undirected edge once as (u, v), u <= v."""

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray | None = None
    label: int = 0
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError(f"graph needs at least one node, got {self.num_nodes}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise ValueError("edge endpoint outside the node range")
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        object.__setattr__(self, "edges", edges)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
                raise ValueError(
                    f"features must be ({self.num_nodes}, dim), got {feats.shape}"
                )
            object.__setattr__(self, "features", feats)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self) -> list[np.ndarray]:
        """Ascending neighbor lists; a self-loop lists the node once."""
        return self._neighbor_lists

    @cached_property
    def _neighbor_lists(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(v)
            if u != v:
                nbrs[v].append(u)
        return [np.array(sorted(n), dtype=np.int64) for n in nbrs]

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self._neighbor_lists], dtype=np.int64)

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.argsort(perm)
        return Graph(
            num_nodes=self.num_nodes,
            edges=perm[self.edges] if self.num_edges else self.edges,
            features=None if self.features is None else self.features[inverse],
            label=self.label,
            node_labels=None if self.node_labels is None else self.node_labels[inverse],
        )


@dataclass(frozen=True, eq=False)
class GraphDataset:
    graphs: tuple[Graph, ...]
    num_classes: int
    name: str = ""
    feature_source: str = "none"  # "node-labels" | "degree-onehot" | "none"
    label_values: tuple = ()  # raw label for each class index, sorted

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        labels = self.labels
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("graph label outside [0, num_classes)")
        missing = set(range(self.num_classes)) - set(labels.tolist())
        if missing:
            raise ValueError(f"classes without any graph: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def feature_dim(self) -> int:
        feats = self.graphs[0].features
        return 0 if feats is None else feats.shape[1]

    def stats(self) -> dict:
        nodes = np.array([g.num_nodes for g in self.graphs])
        edges = np.array([g.num_edges for g in self.graphs])
        return {
            "name": self.name,
            "graphs": len(self.graphs),
            "classes": self.num_classes,
            "mean_nodes": float(nodes.mean()),
            "mean_edges": float(edges.mean()),
        }


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: np.ndarray
    test: np.ndarray


# --------------------------------------------------------------------------
# TU format


def _read_ints(path: Path, name: str) -> list[list[int]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(float(tok)) for tok in line.split(",")])
            except ValueError:
                raise TUFormatError(f"{name}:{lineno}: cannot parse {line!r}") from None
    return rows


def parse_tu_dataset(root: str | os.PathLike, name: str) -> GraphDataset:
    """Load ``root/name/NAME_*.txt`` (or ``root/NAME_*.txt``) into a GraphDataset.

    Raw graph labels are remapped to ``0..C-1`` by sorted order.  Node labels,
    when present, become one-hot features; otherwise features are left unset
    and :func:`degree_onehot_features` should be applied.
    """
    root = Path(root)
    base = root / name if (root / name).is_dir() else root
    paths = {key: base / f"{name}_{key}.txt" for key in ("A", "graph_indicator", "graph_labels")}
    for key, path in paths.items():
        if not path.is_file():
            raise FileNotFoundError(f"missing TU file {path.name} in {base}")

    indicator = np.array([r[0] for r in _read_ints(paths["graph_indicator"], paths["graph_indicator"].name)])
    raw_labels = [r[0] for r in _read_ints(paths["graph_labels"], paths["graph_labels"].name)]
    n_graphs = len(raw_labels)
    graph_ids = np.unique(indicator)
    if len(graph_ids) != n_graphs or (n_graphs and (graph_ids[0] != 1 or graph_ids[-1] != n_graphs)):
        raise TUFormatError(
            f"{paths['graph_indicator'].name} names {len(graph_ids)} graphs but "
            f"{paths['graph_labels'].name} has {n_graphs} labels"
        )
    if np.any(np.diff(indicator) < 0):
        raise TUFormatError(f"{paths['graph_indicator'].name}: nodes are not grouped by graph")

    gid = indicator - 1
    counts = np.bincount(gid, minlength=n_graphs)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    per_graph_edges: list[list[tuple[int, int]]] = [[] for _ in range(n_graphs)]
    n_nodes_total = len(indicator)
    with open(paths["A"]) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                u, v = (int(tok) - 1 for tok in line.split(","))
            except ValueError:
                raise TUFormatError(f"{paths['A'].name}:{lineno}: cannot parse {line!r}") from None
            if not (0 <= u < n_nodes_total and 0 <= v < n_nodes_total):
                raise TUFormatError(f"{paths['A'].name}:{lineno}: node index out of range")
            if gid[u] != gid[v]:
                raise TUFormatError(
                    f"{paths['A'].name}:{lineno}: edge ({u + 1}, {v + 1}) joins graphs "
                    f"{gid[u] + 1} and {gid[v] + 1}"
                )
            g = gid[u]
            per_graph_edges[g].append((u - offsets[g], v - offsets[g]))

    node_label_path = base / f"{name}_node_labels.txt"
    node_labels = None
    if node_label_path.is_file():
        node_labels = np.array([r[0] for r in _read_ints(node_label_path, node_label_path.name)])
        if len(node_labels) != n_nodes_total:
            raise TUFormatError(
                f"{node_label_path.name} has {len(node_labels)} lines for {n_nodes_total} nodes"
            )
        alphabet = np.unique(node_labels)
        onehot = np.eye(len(alphabet))[np.searchsorted(alphabet, node_labels)]

    label_values = tuple(sorted(set(raw_labels)))
    remap = {raw: i for i, raw in enumerate(label_values)}
    graphs = []
    for g in range(n_graphs):
        sl = slice(offsets[g], offsets[g] + counts[g])
        graphs.append(
            Graph(
                num_nodes=int(counts[g]),
                edges=np.array(per_graph_edges[g], dtype=np.int64).reshape(-1, 2),
                features=None if node_labels is None else onehot[sl],
                label=remap[raw_labels[g]],
                node_labels=None if node_labels is None else node_labels[sl],
            )
        )
    return GraphDataset(
        graphs=graphs,
        num_classes=len(label_values),
        name=name,
        feature_source="node-labels" if node_labels is not None else "none",
        label_values=label_values,
    )


def write_tu_dataset(dataset: GraphDataset, root: str | os.PathLike, name: str | None = None) -> Path:
    """Write ``dataset`` in TU format under ``root/name``; both edge directions are listed."""
    name = name or dataset.name
    out = Path(root) / name
    out.mkdir(parents=True, exist_ok=True)
    label_values = dataset.label_values or tuple(range(dataset.num_classes))

    a_lines, ind_lines, node_lines = [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs, start=1):
        directed = set()
        for u, v in g.edges:
            directed.add((int(u), int(v)))
            directed.add((int(v), int(u)))
        a_lines.extend(f"{u + offset + 1}, {v + offset + 1}" for u, v in sorted(directed))
        ind_lines.extend([str(gi)] * g.num_nodes)
        if g.node_labels is not None:
            node_lines.extend(str(int(x)) for x in g.node_labels)
        offset += g.num_nodes

    def dump(suffix, lines):
        (out / f"{name}_{suffix}.txt").write_text("".join(line + "\n" for line in lines))

    dump("A", a_lines)
    dump("graph_indicator", ind_lines)
    dump("graph_labels", [str(label_values[g.label]) for g in dataset.graphs])
    if node_lines:
        dump("node_labels", node_lines)
    return out


def degree_onehot_features(dataset: GraphDataset) -> GraphDataset:
    """Replace node features by one-hot node degree, width = dataset max degree + 1."""
    degrees = [g.degrees() for g in dataset.graphs]
    width = int(max(d.max() for d in degrees)) + 1
    eye = np.eye(width)
    graphs = [replace(g, features=eye[d]) for g, d in zip(dataset.graphs, degrees)]
    return replace(dataset, graphs=tuple(graphs), feature_source="degree-onehot")


def load_dataset(root: str | os.PathLike, name: str) -> GraphDataset:
    """Parse a TU dataset and fall back to degree features when it has no node labels."""
    ds = parse_tu_dataset(root, name)
    if ds.feature_source == "none":
        ds = degree_onehot_features(ds)
    return ds


# --------------------------------------------------------------------------
# splits and batches


def stratified_kfold_split(dataset_or_labels, k: int, seed: int) -> list[FoldSplit]:
    """Stratified k-fold split. Accepts a GraphDataset or a label array.

    Each class is shuffled and dealt round-robin over the folds, continuing
    from the fold where the previous class stopped, so both per-class and total
    test-fold sizes differ by at most one.
    """
    labels = (
        dataset_or_labels.labels
        if isinstance(dataset_or_labels, GraphDataset)
        else np.asarray(dataset_or_labels, dtype=np.int64)
    )
    n = len(labels)
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} graphs")

    rng = np.random.default_rng(seed)
    classes, class_counts = np.unique(labels, return_counts=True)
    if class_counts.min() < k:
        logger.warning(
            "smallest class has %d members < %d folds; using unstratified folds",
            class_counts.min(), k,
        )
        groups = [np.arange(n)]
    else:
        groups = [np.flatnonzero(labels == c) for c in classes]

    assignment = np.empty(n, dtype=np.int64)
    cursor = 0
    for members in groups:
        members = rng.permutation(members)
        assignment[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k

    return [
        FoldSplit(fold=f, train=np.flatnonzero(assignment != f), test=np.flatnonzero(assignment == f))
        for f in range(k)
    ]


def subsample_training_set(indices, labels, ratio: float, seed: int) -> np.ndarray:
    """Keep ceil(ratio * count) random members of each class, in original order.

    ``labels`` is indexed by the entries of ``indices``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    indices = np.asarray(indices, dtype=np.int64)
    if ratio == 1.0:
        return indices.copy()
    labels = np.asarray(labels)
    idx_labels = labels[indices]
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(indices), dtype=bool)
    for c in np.unique(idx_labels):
        pos = np.flatnonzero(idx_labels == c)
        n_keep = math.ceil(ratio * len(pos) - 1e-9)
        keep[rng.choice(pos, size=n_keep, replace=False)] = True
    return indices[keep]


def make_minibatches(indices, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle ``indices`` deterministically per (seed, epoch); the last batch may be short."""
    indices = np.asarray(indices)
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if len(indices) == 0:
        raise ValueError("cannot batch an empty index list")
    order = np.random.default_rng([seed, epoch]).permutation(len(indices))
    shuffled = indices[order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


# --------------------------------------------------------------------------
# synthetic fixture


def make_fixture(seed: int = 0, name: str = "FIXTURE") -> GraphDataset:
    """Eight small graphs: four cycles (label 1) and four stars (label 2).

    Cycle nodes all have degree 2; star nodes have degree 1 or >= 3, so the
    two classes have disjoint degree supports.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(4):
        n = int(rng.integers(3, 7))
        perm = rng.permutation(n)
        edges = [(perm[i], perm[(i + 1) % n]) for i in range(n)]
        graphs.append(Graph(num_nodes=n, edges=np.array(edges), label=0))
    for _ in range(4):
        leaves = int(rng.integers(3, 6))
        n = leaves + 1
        perm = rng.permutation(n)
        edges = [(perm[0], perm[i]) for i in range(1, n)]
        graphs.append(Graph(num_nodes=n, edges=np.array(edges), label=1))
    order = rng.permutation(len(graphs))
    return GraphDataset(
        graphs=tuple(graphs[i] for i in order),
        num_classes=2,
        name=name,
        feature_source="none",
        label_values=(1, 2),
    )
