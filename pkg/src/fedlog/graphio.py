"""Graph storage and TSV ingestion, plus SBM generation for synthetic fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, FormatError


@dataclass(eq=False)
class Graph:
    """Undirected simple graph with dense node features and integer labels.

    Adjacency is kept in CSR form (``indptr``/``indices``); neighbor lists are
    sorted and symmetric. ``global_ids`` maps local rows back to the graph this
    one was cut from (identity for a loaded graph).
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    indptr: np.ndarray
    indices: np.ndarray
    global_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.global_ids is None:
            self.global_ids = np.arange(self.n_nodes, dtype=np.int64)

    @classmethod
    def from_edges(cls, features, labels, n_classes: int, edges, global_ids=None) -> "Graph":
        """Build from an (m, 2) edge array; self-loops dropped, duplicates merged."""
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ContractError(f"edge endpoint out of range for {n} nodes")
        edges = edges[edges[:, 0] != edges[:, 1]]
        both = np.concatenate([edges, edges[:, ::-1]], axis=0)
        adj = sp.coo_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n)).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(features, labels, int(n_classes), adj.indptr.copy(), adj.indices.copy(), global_ids)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v."""
        rows = np.repeat(np.arange(self.n_nodes), self.degree)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        """Row-normalized adjacency; rows of isolated nodes are all zero."""
        deg = self.degree.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        data = np.repeat(inv, self.degree)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def neighbor_feature_mean(self) -> np.ndarray:
        return np.asarray(self.mean_adjacency @ self.features)

    def subgraph(self, nodes) -> "Graph":
        """Induced subgraph on ``nodes`` (given in this graph's row ids), rows in the given order."""
        nodes = np.asarray(nodes, dtype=np.int64)
        pos = np.full(self.n_nodes, -1, dtype=np.int64)
        pos[nodes] = np.arange(len(nodes))
        e = self.edges()
        if len(e):
            a, b = pos[e[:, 0]], pos[e[:, 1]]
            keep = (a >= 0) & (b >= 0)
            e = np.stack([a[keep], b[keep]], axis=1)
        return Graph.from_edges(self.features[nodes], self.labels[nodes], self.n_classes, e,
                                global_ids=self.global_ids[nodes])

    def hop_neighborhood(self, seeds, h: int, allowed=None) -> np.ndarray:
        """Nodes within ``h`` hops of ``seeds`` (seeds included), walking only through ``allowed``."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        ok = np.ones(self.n_nodes, dtype=bool) if allowed is None else np.zeros(self.n_nodes, dtype=bool)
        if allowed is not None:
            ok[np.asarray(allowed, dtype=np.int64)] = True
        frontier = np.unique(np.asarray(seeds, dtype=np.int64))
        mask[frontier] = True
        for _ in range(h):
            if not len(frontier):
                break
            nxt = np.concatenate([self.neighbors(v) for v in frontier]) if len(frontier) else frontier
            nxt = np.unique(nxt)
            nxt = nxt[ok[nxt] & ~mask[nxt]]
            mask[nxt] = True
            frontier = nxt
        return np.flatnonzero(mask)

    def validate(self) -> None:
        """Raise ContractError unless the structural invariants hold."""
        a = sp.csr_matrix((np.ones(len(self.indices)), self.indices, self.indptr), shape=(self.n_nodes,) * 2)
        if (a != a.T).nnz:
            raise ContractError("adjacency is not symmetric")
        if a.diagonal().any():
            raise ContractError("graph has self-loops")
        if a.nnz and a.max() > 1:
            raise ContractError("graph has duplicate edges")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError("label outside [0, n_classes)")


# ----------------------------------------------------------------------- I/O


def load_graph(directory, n_classes: int | None = None) -> Graph:
    """Read ``nodes.tsv`` and ``edges.tsv`` from ``directory``.

    The class count comes from ``n_classes`` if given, else from an optional
    ``meta.json`` (``{"n_classes": C}``), else from the largest label.
    """
    directory = Path(directory)
    nodes_path, edges_path = directory / "nodes.tsv", directory / "edges.tsv"
    for p in (nodes_path, edges_path):
        if not p.is_file():
            raise FormatError("missing file", path=p)
    meta_path = directory / "meta.json"
    if n_classes is None and meta_path.is_file():
        n_classes = int(json.loads(meta_path.read_text(encoding="utf-8"))["n_classes"])

    ids, labels, feats = [], [], []
    dim = None
    with open(nodes_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["node_id", "label", "features"]:
            raise FormatError(f"bad header {header!r}", line=1, path=nodes_path)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno, path=nodes_path)
            try:
                nid, lab = int(parts[0]), int(parts[1])
                vec = np.array(parts[2].split(","), dtype=np.float64) if parts[2] else np.zeros(0)
            except ValueError as exc:
                raise FormatError(f"unparsable row: {exc}", line=lineno, path=nodes_path) from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(f"feature count {len(vec)} differs from {dim}", line=lineno, path=nodes_path)
            if lab < 0 or (n_classes is not None and lab >= n_classes):
                raise FormatError(f"label {lab} outside [0, {n_classes})", line=lineno, path=nodes_path)
            ids.append(nid)
            labels.append(lab)
            feats.append(vec)
    if not ids:
        raise FormatError("no nodes", path=nodes_path)
    order = np.argsort(ids)
    ids_sorted = np.asarray(ids)[order]
    if not np.array_equal(ids_sorted, np.arange(len(ids))):
        raise FormatError("node ids must be contiguous integers from 0", path=nodes_path)
    features = np.stack(feats)[order]
    labels_arr = np.asarray(labels)[order]
    if n_classes is None:
        n_classes = int(labels_arr.max()) + 1

    edges = []
    with open(edges_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["src", "dst"]:
            raise FormatError(f"bad header {header!r}", line=1, path=edges_path)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 2:
                    raise ValueError(f"expected 2 fields, got {len(parts)}")
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise FormatError(f"unparsable edge: {exc}", line=lineno, path=edges_path) from None
            if not (0 <= u < len(ids) and 0 <= v < len(ids)):
                raise FormatError(f"edge ({u}, {v}) references unknown node", line=lineno, path=edges_path)
            edges.append((u, v))
    return Graph.from_edges(features, labels_arr, n_classes, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def save_graph(graph: Graph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("node_id\tlabel\tfeatures\n")
        for v in range(graph.n_nodes):
            feats = ",".join(repr(float(x)) for x in graph.features[v])
            fh.write(f"{v}\t{int(graph.labels[v])}\t{feats}\n")
    with open(directory / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src\tdst\n")
        for u, v in graph.edges():
            fh.write(f"{u}\t{v}\n")
    (directory / "meta.json").write_text(json.dumps({"n_classes": graph.n_classes}) + "\n", encoding="utf-8")


# ------------------------------------------------------------- generation


def generate_sbm(block_sizes, p_intra: float, p_inter: float, feature_dim: int,
                 separation: float, seed: int, noise: float = 1.0) -> Graph:
    """Stochastic block model graph; block ``c`` is class ``c``.

    Each class gets a random mean direction of length ``separation`` and node
    features are that mean plus isotropic Gaussian noise of scale ``noise``.
    """
    sizes = [int(b) for b in block_sizes]
    if not sizes or min(sizes) <= 0:
        raise ContractError(f"every block needs at least one node, got {sizes}")
    for name, p in (("p_intra", p_intra), ("p_inter", p_inter)):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"{name}={p} is not a probability")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_intra, p_inter)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = rng.normal(size=(len(sizes), feature_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + noise * rng.normal(size=(n, feature_dim))
    return Graph.from_edges(features, labels, len(sizes), edges)


# ------------------------------------------------------------- statistics


def class_rates(graph: Graph, nodes=None) -> np.ndarray:
    """Fraction of ``nodes`` (all nodes if None) carrying each label."""
    labels = graph.labels if nodes is None else graph.labels[np.asarray(nodes, dtype=np.int64)]
    if len(labels) == 0:
        raise ContractError("class rates of an empty node set are undefined")
    counts = np.bincount(labels, minlength=graph.n_classes).astype(np.float64)
    return counts / counts.sum()


def class_counts(graph: Graph, nodes=None) -> np.ndarray:
    labels = graph.labels if nodes is None else graph.labels[np.asarray(nodes, dtype=np.int64)]
    return np.bincount(labels, minlength=graph.n_classes)


def degree_headness_split(graph: Graph, lam: float, nodes=None) -> tuple[np.ndarray, np.ndarray]:
    """(head, tail) node ids: tail means degree <= lam."""
    if lam < 0:
        raise ContractError(f"degree threshold must be >= 0, got {lam}")
    nodes = np.arange(graph.n_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    tail = graph.degree[nodes] <= lam
    return nodes[~tail], nodes[tail]
