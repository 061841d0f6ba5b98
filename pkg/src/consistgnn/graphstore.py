"""Graph storage, datasets, splits and their on-disk formats."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import GradTensor

UNLABELED = -1

FEATURES_MAGIC = b"GNNF"
LABELS_MAGIC = b"GNNL"


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Sorted, duplicate-free adjacency lists in compressed sparse row form."""

    num_nodes: int
    offsets: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self):
        self.offsets.setflags(write=False)
        self.neighbors.setflags(write=False)

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, v: int) -> np.ndarray:
        return self.neighbors[self.offsets[v]:self.offsets[v + 1]]

    def edge_array(self) -> np.ndarray:
        """All stored (src, dst) pairs, shape ``(E, 2)``, in CSR order."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return np.stack([src, self.neighbors.astype(np.int64)], axis=1)

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors_of(u)
        i = np.searchsorted(row, v)
        return bool(i < row.size and row[i] == v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CsrGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.neighbors, other.neighbors))


@dataclass(frozen=True, eq=False)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, arr)
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("train/val/test splits must be disjoint")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Split):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("train", "val", "test"))


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: CsrGraph
    features: GradTensor
    labels: np.ndarray
    num_classes: int
    split: Split
    # original node id of each row; identity unless the dataset was induced
    node_ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.shape[0] != n:
            raise ShapeError(f"{self.features.shape[0]} feature rows for {n} nodes")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels must have length {n}")
        if ((labels < UNLABELED) | (labels >= self.num_classes)).any():
            raise ConfigError("labels must lie in [0, num_classes) or be UNLABELED")
        for name in ("train", "val", "test"):
            idx = getattr(self.split, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"{name} split references a node outside the graph")
        for name in ("train", "val"):
            if (labels[getattr(self.split, name)] == UNLABELED).any():
                raise ConfigError(f"every {name} node needs a label")
        object.__setattr__(self, "labels", labels)
        if self.node_ids is None:
            object.__setattr__(self, "node_ids", np.arange(n, dtype=np.int64))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# construction


def build_csr(num_nodes: int, edges, undirected: bool = True) -> CsrGraph:
    """Build a deduplicated CSR graph from ``(u, v)`` pairs.

    With ``undirected`` both directions are stored.  Self-loops are kept as
    given.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise IndexError(f"edge endpoint out of range for {num_nodes} nodes")
    if undirected:
        e = np.concatenate([e, e[:, ::-1]], axis=0)
    # unique on the packed key also sorts by (src, dst)
    keys = np.unique(e[:, 0] * num_nodes + e[:, 1]) if e.size else np.zeros(0, np.int64)
    src, dst = keys // max(num_nodes, 1), keys % max(num_nodes, 1)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
    return CsrGraph(num_nodes, offsets, dst.astype(np.int64))


def add_self_loops(g: CsrGraph) -> CsrGraph:
    loops = np.arange(g.num_nodes, dtype=np.int64)
    edges = np.concatenate([g.edge_array(), np.stack([loops, loops], axis=1)])
    return build_csr(g.num_nodes, edges, undirected=False)


def undirected_edges(g: CsrGraph, include_self_loops: bool = False) -> np.ndarray:
    """Each undirected edge once, as ``u <= v`` pairs in sorted order."""
    e = g.edge_array()
    keep = e[:, 0] < e[:, 1]
    if include_self_loops:
        keep |= e[:, 0] == e[:, 1]
    return e[keep]


def induce_train_subgraph(ds: Dataset) -> Dataset:
    """Restrict the dataset to its training nodes and the edges among them.

    Rows are re-indexed in ascending original id order; ``node_ids`` maps new
    rows back to ids in ``ds``.  The induced split has every node in train.
    """
    train = np.sort(ds.split.train)
    if train.size == 0:
        raise ConfigError("cannot induce a subgraph from an empty train set")
    new_id = np.full(ds.num_nodes, -1, dtype=np.int64)
    new_id[train] = np.arange(train.size)
    e = ds.graph.edge_array()
    e = e[(new_id[e[:, 0]] >= 0) & (new_id[e[:, 1]] >= 0)]
    graph = build_csr(train.size, new_id[e], undirected=False)
    empty = np.zeros(0, dtype=np.int64)
    return Dataset(
        graph=graph,
        features=GradTensor(ds.features.values[train]),
        labels=ds.labels[train],
        num_classes=ds.num_classes,
        split=Split(np.arange(train.size), empty, empty),
        node_ids=ds.node_ids[train],
    )


def subsample_labels(ds: Dataset, keep_fraction: float, seed) -> Dataset:
    """Keep a uniform random ``round(keep_fraction * |train|)`` of the train set."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return ds
    train = ds.split.train
    k = int(round(keep_fraction * train.size))
    if k == 0:
        raise ConfigError("label subsampling left an empty train set")
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(train, size=k, replace=False))
    return replace(ds, split=Split(kept, ds.split.val, ds.split.test))


def stratified_split(labels: np.ndarray, num_classes: int, fractions=(0.1, 0.1), seed=0) -> Split:
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(fractions[0] * members.size))
        n_va = int(round(fractions[1] * members.size))
        train.append(members[:n_tr])
        val.append(members[n_tr:n_tr + n_va])
        test.append(members[n_tr + n_va:])
    return Split(*(np.sort(np.concatenate(p)) for p in (train, val, test)))


def generate_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    feature_noise: float,
    seed,
) -> Dataset:
    """Planted-partition graph with block-id labels and noisy one-hot features.

    Node ``i`` belongs to block ``i // nodes_per_block``.  Its feature row is
    the one-hot of its block plus N(0, feature_noise^2) noise.  Self-loops are
    added, and the split is 10/10/80 stratified by block.
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ConfigError("p_in and p_out must lie in [0, 1]")
    n = blocks * nodes_per_block
    if n < 2:
        raise ConfigError("need at least two nodes")
    if feature_dim < blocks:
        raise ConfigError("feature_dim must be at least the number of blocks")
    if feature_noise < 0:
        raise ConfigError("feature_noise must be non-negative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(blocks, dtype=np.int64), nodes_per_block)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    graph = add_self_loops(build_csr(n, edges, undirected=True))

    features = np.zeros((n, feature_dim))
    features[np.arange(n), labels] = 1.0
    features += feature_noise * rng.standard_normal((n, feature_dim))
    split = stratified_split(labels, blocks, seed=rng.integers(2**63))
    return Dataset(graph, GradTensor(features), labels, blocks, split)


def multi_source_bfs(g: CsrGraph, sources: Iterable[int]) -> np.ndarray:
    """Hop distance from each node to the nearest source; ``inf`` if unreachable."""
    src = np.unique(np.asarray(list(sources), dtype=np.int64))
    if src.size == 0:
        raise ConfigError("multi_source_bfs needs at least one source")
    if src.min() < 0 or src.max() >= g.num_nodes:
        raise IndexError("source id out of range")
    dist = np.full(g.num_nodes, np.inf)
    dist[src] = 0.0
    frontier = src
    level = 0
    while frontier.size:
        level += 1
        starts, ends = g.offsets[frontier], g.offsets[frontier + 1]
        nbr = g.neighbors[_ranges(starts, ends)]
        nbr = np.unique(nbr[np.isinf(dist[nbr])])
        dist[nbr] = level
        frontier = nbr
    return dist


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, e)`` for each pair."""
    lengths = ends - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    first = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return first + np.arange(total)


# ---------------------------------------------------------------------------
# file formats


def write_edge_list(path, g: CsrGraph) -> None:
    """One ``src<TAB>dst`` line per undirected edge (``src < dst``); self-loops omitted."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in undirected_edges(g):
            fh.write(f"{u}\t{v}\n")


def read_edge_list(path) -> np.ndarray:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'src<TAB>dst'")
            edges.append((int(parts[0]), int(parts[1])))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<QQ", *arr.shape))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURES_MAGIC:
        raise ValueError(f"{path}: bad features magic")
    rows, cols = struct.unpack_from("<QQ", data, 4)
    payload = np.frombuffer(data, dtype="<f4", offset=20)
    if payload.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} floats, found {payload.size}")
    return payload.reshape(rows, cols).astype(np.float64)


def write_labels(path, labels: np.ndarray) -> None:
    arr = np.ascontiguousarray(labels, dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<Q", arr.size))
        fh.write(arr.tobytes())


def read_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LABELS_MAGIC:
        raise ValueError(f"{path}: bad labels magic")
    (n,) = struct.unpack_from("<Q", data, 4)
    payload = np.frombuffer(data, dtype="<i8", offset=12)
    if payload.size != n:
        raise ValueError(f"{path}: expected {n} labels, found {payload.size}")
    return payload.astype(np.int64)


def write_split(path, split: Split) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: getattr(split, k).tolist() for k in ("train", "val", "test")}, fh)


def read_split(path) -> Split:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return Split(*(np.asarray(obj[k], dtype=np.int64) for k in ("train", "val", "test")))


def save_dataset(directory, ds: Dataset) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": directory / "edges.tsv",
        "features": directory / "features.gnnf",
        "labels": directory / "labels.gnnl",
        "split": directory / "split.json",
    }
    write_edge_list(paths["edges"], ds.graph)
    write_features(paths["features"], ds.features.values)
    write_labels(paths["labels"], ds.labels)
    write_split(paths["split"], ds.split)
    return paths


def load_dataset(edges, features, labels, split, num_classes: Optional[int] = None) -> Dataset:
    """Read the four dataset files; the graph is symmetrized and given self-loops."""
    x = read_features(features)
    y = read_labels(labels)
    if y.shape[0] != x.shape[0]:
        raise ShapeError("features and labels disagree on the number of nodes")
    graph = add_self_loops(build_csr(x.shape[0], read_edge_list(edges), undirected=True))
    if num_classes is None:
        num_classes = int(y.max()) + 1 if (y >= 0).any() else 1
    return Dataset(graph, GradTensor(x), y, num_classes, read_split(split))
