"""Graph container, file ingest, k-hop neighborhoods and induced subgraph views.

Adjacency is stored once in CSR form (``indptr``/``indices``), undirected,
deduplicated and without self-loops. Node ids inside the library are dense
``0..n-1``; sparse external ids are remapped on ingest and kept in
``Graph.external_ids`` so that reports can be written back in the caller's ids.
"""

from __future__ import annotations

import csv
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DataError

SPLIT_NAMES = ("train", "train_labeled", "val", "val_labeled", "test", "test_target")
PARTITIONS = ("train", "val", "test")
# splits.json uses the plural for the test targets
SPLIT_FILE_KEYS = {
    "train": "train",
    "train_labeled": "train_labeled",
    "val": "val",
    "val_labeled": "val_labeled",
    "test": "test",
    "test_target": "test_targets",
}
_SUBSET_OF = {"train_labeled": "train", "val_labeled": "val", "test_target": "test"}
BINARY_MAGIC = b"GIDV"


def node_set(ids: Iterable[int], n_nodes: int | None = None) -> np.ndarray:
    """Sorted, duplicate-free int64 array of node ids."""
    arr = np.unique(np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64))
    if arr.size and arr[0] < 0:
        raise DataError(f"negative node id {arr[0]}")
    if n_nodes is not None and arr.size and arr[-1] >= n_nodes:
        raise DataError(f"node id out of range: {arr[-1]} >= {n_nodes}")
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    splits: Mapping[str, np.ndarray] = field(default_factory=dict)
    external_ids: np.ndarray | None = None
    transductive: bool = False

    def __post_init__(self):
        n = self.n_nodes
        if self.indptr.shape != (n + 1,):
            raise DataError("indptr length does not match feature rows")
        if self.labels is not None and self.labels.shape != (n,):
            raise DataError("labels length does not match feature rows")
        masks = {}
        for name in SPLIT_NAMES:
            m = self.splits.get(name)
            masks[name] = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if masks[name].shape != (n,):
                raise DataError(f"split mask {name!r} has wrong length")
        object.__setattr__(self, "splits", masks)
        self._check_splits()

    def _check_splits(self):
        m = self.splits
        overlap = (m["train"].astype(int) + m["val"] + m["test"])
        if np.any(overlap > 1):
            raise DataError("train/val/test splits overlap")
        if not self.transductive and np.any(overlap == 0) and np.any(overlap):
            missing = np.flatnonzero(overlap == 0)[:5].tolist()
            raise DataError(f"inductive mode requires every node in exactly one split; unassigned e.g. {missing}")
        for sub, parent in _SUBSET_OF.items():
            if np.any(m[sub] & ~m[parent]):
                raise DataError(f"{sub} nodes must belong to {parent}")
        for name in ("train_labeled", "val_labeled"):
            if m[name].any() and (self.labels is None or np.any(self.labels[m[name]] < 0)):
                raise DataError(f"{name} node without a label")

    @classmethod
    def from_edges(
        cls,
        n_nodes: int,
        edges,
        features,
        labels=None,
        splits: Mapping[str, Iterable[int]] | None = None,
        external_ids=None,
        transductive: bool = False,
    ) -> "Graph":
        """Build a graph from an edge list; edges are mirrored, deduplicated, self-loops dropped.

        ``splits`` maps split names to node-id lists (or boolean masks).
        """
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[0] != n_nodes:
            raise DataError("feature matrix must have one row per node")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n_nodes):
            bad = int(e.max()) if e.max() >= n_nodes else int(e.min())
            raise DataError(f"node id out of range: {bad} (n_nodes={n_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        adj = sp.coo_matrix(
            (np.ones(len(both), dtype=np.int8), (both[:, 0], both[:, 1])), shape=(n_nodes, n_nodes)
        ).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        lab = None
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64)
            if lab.shape != (n_nodes,):
                raise DataError("labels must have one entry per node (-1 for missing)")
            if np.any(lab < -1):
                raise DataError("label out of range")
        masks = {}
        for name, ids in (splits or {}).items():
            if name == "test_targets":
                name = "test_target"
            if name not in SPLIT_NAMES:
                raise DataError(f"unknown split {name!r}")
            ids = np.asarray(ids)
            if ids.dtype == bool:
                masks[name] = ids
            else:
                mask = np.zeros(n_nodes, dtype=bool)
                mask[node_set(ids, n_nodes)] = True
                masks[name] = mask
        return cls(
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
            features=features,
            labels=lab,
            splits=masks,
            external_ids=None if external_ids is None else np.asarray(external_ids, dtype=np.int64),
            transductive=transductive,
        )

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        return sp.csr_matrix(
            (np.ones(len(self.indices), dtype=np.float64), self.indices, self.indptr), shape=(n, n)
        )

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v."""
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def split(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits[name]).astype(np.int64)

    def partition_mask(self, nodes) -> np.ndarray:
        """Mask of the split graph that contains ``nodes``; everything in transductive mode."""
        if self.transductive:
            return np.ones(self.n_nodes, dtype=bool)
        nodes = np.asarray(nodes, dtype=np.int64)
        for part in PARTITIONS:
            mask = self.splits[part]
            if mask[nodes].all():
                return mask
        raise DataError("nodes span several split graphs")

    def partition_nodes(self, nodes) -> np.ndarray:
        return np.flatnonzero(self.partition_mask(nodes)).astype(np.int64)

    def has_label(self, nodes) -> bool:
        return self.labels is not None and bool(np.all(self.labels[np.asarray(nodes, dtype=np.int64)] >= 0))

    @property
    def n_classes(self) -> int:
        if self.labels is None or not np.any(self.labels >= 0):
            return 0
        return int(self.labels.max()) + 1

    def to_external(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        return nodes if self.external_ids is None else self.external_ids[nodes]


def k_hop_neighborhood(g: Graph, targets, k: int) -> np.ndarray:
    """Nodes at shortest-path distance 1..k from any target, inside the targets' split graph."""
    if k < 1:
        raise DataError("k must be >= 1")
    targets = node_set(targets, g.n_nodes)
    if targets.size == 0:
        raise DataError("targets must be nonempty")
    allowed = g.partition_mask(targets)
    dist = np.full(g.n_nodes, -1, dtype=np.int64)
    dist[targets] = 0
    queue = deque(targets.tolist())
    while queue:
        u = queue.popleft()
        if dist[u] == k:
            continue
        for v in g.neighbors(u):
            if dist[v] < 0 and allowed[v]:
                dist[v] = dist[u] + 1
                queue.append(v)
    return np.flatnonzero(dist > 0).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SubgraphView:
    """Induced subgraph over ``active`` nodes.

    ``edges`` holds the induced undirected edges in global ids, rows (u, v) with
    u < v, lexicographically sorted. ``cache`` is scratch space for derived
    operators (normalized adjacency and the like); views are never mutated otherwise.
    """

    base: Graph
    active: np.ndarray
    edges: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.active)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def features(self) -> np.ndarray:
        return self.base.features[self.active]

    def local(self, nodes) -> np.ndarray:
        """Row positions of global ``nodes`` within this view."""
        nodes = np.asarray(nodes, dtype=np.int64)
        pos = np.searchsorted(self.active, nodes)
        if np.any(pos >= len(self.active)) or np.any(self.active[np.minimum(pos, len(self.active) - 1)] != nodes):
            raise DataError("node not active in view")
        return pos

    @cached_property
    def local_edges(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.edges):
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        return np.searchsorted(self.active, self.edges[:, 0]), np.searchsorted(self.active, self.edges[:, 1])

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        r, c = self.local_edges
        n = self.n_nodes
        data = np.ones(2 * len(r))
        return sp.coo_matrix((data, (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)).tocsr()

    def add(self, node: int) -> "SubgraphView":
        """New view with ``node`` admitted; only the node's own edges are examined."""
        node = int(node)
        pos = np.searchsorted(self.active, node)
        if pos < len(self.active) and self.active[pos] == node:
            return self
        nbrs = self.base.neighbors(node)
        idx = np.searchsorted(self.active, nbrs)
        idx = np.minimum(idx, max(len(self.active) - 1, 0))
        hit = nbrs[self.active[idx] == nbrs] if len(self.active) else nbrs[:0]
        new_edges = np.stack([np.minimum(hit, node), np.maximum(hit, node)], axis=1)
        edges = np.concatenate([self.edges, new_edges]) if len(new_edges) else self.edges
        if len(new_edges):
            edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        return SubgraphView(self.base, np.insert(self.active, pos, node), edges)

    def without_edges(self) -> "SubgraphView":
        return SubgraphView(self.base, self.active, np.zeros((0, 2), dtype=np.int64))

    def restrict(self, nodes) -> "SubgraphView":
        return induced_view(self.base, np.intersect1d(self.active, node_set(nodes)))


def induced_view(g: Graph, active) -> SubgraphView:
    """View exposing only edges with both endpoints in ``active`` (built from scratch)."""
    active = node_set(active, g.n_nodes)
    sub = g.adjacency[active][:, active]
    upper = sp.triu(sub, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    edges = np.stack([active[upper.row[order]], active[upper.col[order]]], axis=1).astype(np.int64)
    return SubgraphView(g, active, edges.reshape(-1, 2))


def split_view(g: Graph, nodes) -> SubgraphView:
    """Full split graph containing ``nodes`` (the whole graph in transductive mode)."""
    return induced_view(g, g.partition_nodes(nodes))


# ---------------------------------------------------------------- file ingest


def _read_int_rows(path: Path, ncols: int) -> list[list[str]]:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if i == 0:
                try:
                    int(row[0])
                except ValueError:
                    continue  # header
            if len(row) < ncols:
                raise DataError(f"{path}: expected {ncols} columns, got {len(row)}")
            rows.append(row)
    return rows


def read_features(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return (features, external ids or None). Binary files carry no ids."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        raw = path.read_bytes()
        n, d = struct.unpack("<II", raw[4:12])
        body = np.frombuffer(raw, dtype="<f4", offset=12)
        if body.size != n * d:
            raise DataError(f"{path}: expected {n}x{d} floats, found {body.size}")
        return body.reshape(n, d).astype(np.float32), None
    rows = _read_int_rows(path, 2)
    if not rows:
        raise DataError(f"{path}: no feature rows")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise DataError(f"{path}: ragged feature rows")
    feats = np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float32)
    if len(np.unique(ids)) != len(ids):
        raise DataError(f"{path}: duplicate node id")
    order = np.argsort(ids, kind="stable")
    return feats[order], ids[order]


def write_features(path, features: np.ndarray, binary: bool = False, ids=None) -> None:
    features = np.asarray(features, dtype=np.float32)
    n, d = features.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC + struct.pack("<II", n, d))
            fh.write(features.astype("<f4").tobytes())
        return
    ids = np.arange(n) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"] + [f"f{j}" for j in range(d)])
        for i, row in zip(ids, features):
            w.writerow([int(i)] + [repr(float(x)) for x in row])


def load_graph(edge_path, feature_path, label_path=None, split_path=None, transductive: bool = False) -> Graph:
    """Read the standard file set; the feature file defines the node universe."""
    feats, ext = read_features(feature_path)
    n = feats.shape[0]
    if ext is None or np.array_equal(ext, np.arange(n)):
        remap = None

        def to_dense(ids: np.ndarray) -> np.ndarray:
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                bad = ids[(ids < 0) | (ids >= n)][0]
                raise DataError(f"node id out of range: {int(bad)} (n_nodes={n})")
            return ids
    else:
        remap = ext

        def to_dense(ids: np.ndarray) -> np.ndarray:
            pos = np.searchsorted(remap, ids)
            pos_c = np.minimum(pos, n - 1)
            bad = remap[pos_c] != ids
            if np.any(bad):
                raise DataError(f"node id out of range: {int(ids[bad][0])} not in feature file")
            return pos

    edge_rows = _read_int_rows(Path(edge_path), 2)
    edges = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.int64).reshape(-1, 2)
    edges = to_dense(edges.ravel()).reshape(-1, 2)

    labels = None
    if label_path is not None:
        labels = np.full(n, -1, dtype=np.int64)
        rows = _read_int_rows(Path(label_path), 2)
        ids = to_dense(np.array([int(r[0]) for r in rows], dtype=np.int64))
        vals = np.array([int(r[1]) for r in rows], dtype=np.int64)
        if np.any(vals < 0):
            raise DataError("label out of range")
        labels[ids] = vals

    splits = {}
    if split_path is not None:
        with open(split_path) as fh:
            raw = json.load(fh)
        for name, key in SPLIT_FILE_KEYS.items():
            if key in raw:
                splits[name] = to_dense(np.asarray(raw[key], dtype=np.int64))
        unknown = set(raw) - set(SPLIT_FILE_KEYS.values())
        if unknown:
            raise DataError(f"unknown split keys {sorted(unknown)}")
    return Graph.from_edges(n, edges, feats, labels, splits, external_ids=remap, transductive=transductive)


def write_graph(g: Graph, directory, binary_features: bool = False) -> dict[str, Path]:
    """Write edges.csv, features (csv or bin), labels.csv and splits.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = g.to_external(np.arange(g.n_nodes))
    paths = {
        "edges": d / "edges.csv",
        "features": d / ("features.bin" if binary_features else "features.csv"),
        "labels": d / "labels.csv",
        "splits": d / "splits.json",
    }
    with open(paths["edges"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for u, v in g.edge_list():
            w.writerow([int(ext[u]), int(ext[v])])
    write_features(paths["features"], g.features, binary=binary_features, ids=ext)
    if g.labels is not None:
        with open(paths["labels"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "label"])
            for i in np.flatnonzero(g.labels >= 0):
                w.writerow([int(ext[i]), int(g.labels[i])])
    else:
        del paths["labels"]
    payload = {key: ext[g.splits[name]].tolist() for name, key in SPLIT_FILE_KEYS.items()}
    paths["splits"].write_text(json.dumps(payload, indent=1) + "\n")
    return paths
