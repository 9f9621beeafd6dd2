"""Graph partitioning and construction of federated evaluation scenarios.

A scenario freezes every node-id list a run needs (client parts, splits,
excised missing-class nodes, unseen-node expansions, new-client holdout) so it
can be exported to JSON and replayed exactly.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import rng as rngmod
from .errors import ContractError, FormatError, ScenarioError
from .graphio import Graph, class_counts

DEFAULT_SPLIT = (0.4, 0.3, 0.3)


# --------------------------------------------------------------- partitioner


def _hop_distances(graph: Graph, source: int) -> np.ndarray:
    adj = graph.mean_adjacency
    return shortest_path(adj, indices=source, unweighted=True, directed=False)


def partition_graph(graph: Graph, parts: int, seed: int) -> list[np.ndarray]:
    """Split nodes into ``parts`` disjoint, size-balanced, low-cut regions.

    Seeds are picked by farthest-point selection (hop distance) starting from
    the highest-degree node. Regions then grow round-robin; on its turn a
    region claims the unassigned frontier node with the most neighbors already
    inside it, or any unassigned node if its frontier is exhausted. Ties are
    broken by a seeded random rank. Part sizes differ by at most one node.
    """
    n = graph.n_nodes
    if parts < 1 or parts > n:
        raise ContractError(f"cannot split {n} nodes into {parts} parts")
    if parts == 1:
        return [np.arange(n)]
    rank = np.random.default_rng(seed).permutation(n)

    first = int(np.lexsort((rank, -graph.degree))[0])
    seeds = [first]
    nearest = _hop_distances(graph, first)
    while len(seeds) < parts:
        score = np.where(np.isinf(nearest), np.finfo(float).max, nearest)
        score[seeds] = -1.0
        nxt = int(np.lexsort((rank, -score))[0])
        seeds.append(nxt)
        nearest = np.minimum(nearest, _hop_distances(graph, nxt))

    owner = np.full(n, -1, dtype=np.int64)
    target = [n // parts + (1 if p < n % parts else 0) for p in range(parts)]
    size = [0] * parts
    counts = [dict() for _ in range(parts)]
    heaps: list[list] = [[] for _ in range(parts)]
    spare = iter(np.argsort(rank))

    def claim(p: int, v: int) -> None:
        owner[v] = p
        size[p] += 1
        for u in graph.neighbors(v):
            if owner[u] < 0:
                c = counts[p].get(u, 0) + 1
                counts[p][u] = c
                heapq.heappush(heaps[p], (-c, rank[u], u))

    for p, s in enumerate(seeds):
        claim(p, s)
    remaining = n - parts
    while remaining:
        for p in range(parts):
            if not remaining or size[p] >= target[p]:
                continue
            v = -1
            heap = heaps[p]
            while heap:
                negc, _, u = heapq.heappop(heap)
                if owner[u] < 0 and -negc == counts[p][u]:
                    v = u
                    break
            if v < 0:
                for u in spare:
                    if owner[u] < 0:
                        v = int(u)
                        break
            claim(p, v)
            remaining -= 1
    return [np.flatnonzero(owner == p) for p in range(parts)]


def edge_cut(graph: Graph, parts: list[np.ndarray]) -> int:
    owner = np.full(graph.n_nodes, -1)
    for p, nodes in enumerate(parts):
        owner[nodes] = p
    e = graph.edges()
    return int(np.sum(owner[e[:, 0]] != owner[e[:, 1]])) if len(e) else 0


# ------------------------------------------------------------------ helpers


def select_missing_classes(counts, min_missing_nodes: int = 5) -> list[int]:
    """Classes to excise from a client: the rarest present class, widened
    with the next-rarest ones until together they hold ``min_missing_nodes``.

    Absent classes (count 0) are never selected and at least one present
    class always remains.
    """
    counts = np.asarray(counts)
    present = [c for c in range(len(counts)) if counts[c] > 0]
    if len(present) < 2:
        raise ContractError("a client with fewer than two present classes has nothing to excise")
    order = sorted(present, key=lambda c: (counts[c], c))
    chosen = [order[0]]
    total = int(counts[order[0]])
    for c in order[1:-1]:
        if total >= min_missing_nodes:
            break
        chosen.append(c)
        total += int(counts[c])
    return sorted(chosen)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(labels: np.ndarray, nodes: np.ndarray, ratios, rng: np.random.Generator):
    """Per-class shuffled (train, valid, test) split of ``nodes``."""
    r_tr, r_va = ratios[0], ratios[1]
    train, valid, test = [], [], []
    nodes = np.asarray(nodes, dtype=np.int64)
    for c in np.unique(labels[nodes]):
        members = rng.permutation(nodes[labels[nodes] == c])
        n_c = len(members)
        n_tr = min(_round_half_up(r_tr * n_c), n_c)
        n_va = min(_round_half_up(r_va * n_c), n_c - n_tr)
        train.append(members[:n_tr])
        valid.append(members[n_tr:n_tr + n_va])
        test.append(members[n_tr + n_va:])
    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    return cat(train), cat(valid), cat(test)


# ------------------------------------------------------------------ scenario


@dataclass
class ClientData:
    """Node-id lists (global ids) for one client."""

    client_id: int
    nodes: np.ndarray
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    missing_classes: list = field(default_factory=list)
    excised: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unseen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unseen_test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    missing_test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class FederatedScenario:
    n_nodes: int
    n_classes: int
    clients: list
    new_client_nodes: np.ndarray
    new_client_test: np.ndarray
    open_set: bool = False
    crop: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    h: int = 2
    seed: int = 0
    kind: str = "standard"
    extra: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, np.ndarray):
                return [int(v) for v in x]
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, np.integer):
                return int(x)
            return x

        d = asdict(self)
        return conv(d)

    @classmethod
    def from_dict(cls, d: dict) -> "FederatedScenario":
        arr = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
        try:
            clients = [
                ClientData(
                    client_id=int(c["client_id"]), nodes=arr(c["nodes"]), train=arr(c["train"]),
                    valid=arr(c["valid"]), test=arr(c["test"]), missing_classes=[int(x) for x in c["missing_classes"]],
                    excised=arr(c["excised"]), unseen=arr(c["unseen"]), unseen_test=arr(c["unseen_test"]),
                    missing_test=arr(c["missing_test"]),
                )
                for c in d["clients"]
            ]
            return cls(
                n_nodes=int(d["n_nodes"]), n_classes=int(d["n_classes"]), clients=clients,
                new_client_nodes=arr(d["new_client_nodes"]), new_client_test=arr(d["new_client_test"]),
                open_set=bool(d["open_set"]), crop=arr(d["crop"]), h=int(d["h"]), seed=int(d["seed"]),
                kind=d.get("kind", "standard"), extra=d.get("extra", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed scenario document: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FederatedScenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"scenario is not valid JSON: {exc}", path=path) from None


def build_scenario(graph: Graph, n_clients: int, open_set: bool = False, h: int = 2, seed: int = 0,
                   split=DEFAULT_SPLIT, min_missing_nodes: int = 5) -> FederatedScenario:
    """Partition ``graph`` into clients plus a held-out new client and derive
    every evaluation node set (seen graph, unseen node, missing class, new client).
    """
    if n_clients < 1:
        raise ContractError(f"need at least one client, got {n_clients}")
    if h < 0:
        raise ContractError(f"hop count must be >= 0, got {h}")
    n = graph.n_nodes
    crop = np.zeros(0, dtype=np.int64)
    if open_set:
        crop_rng = rngmod.stream(seed, "crop")
        crop = np.sort(crop_rng.choice(n, size=_round_half_up(0.2 * n), replace=False))
    retained = np.setdiff1d(np.arange(n), crop)
    parts = partition_graph(graph.subgraph(retained), n_clients + 1, seed)
    parts = [np.sort(retained[p]) for p in parts]

    clients = []
    for k in range(n_clients):
        part = parts[k]
        counts = class_counts(graph, part)
        try:
            missing = select_missing_classes(counts, min_missing_nodes)
        except ContractError as exc:
            raise ScenarioError(f"client {k}: {exc}") from None
        excise_mask = np.isin(graph.labels[part], missing)
        excised = part[excise_mask]
        local = part[~excise_mask]
        if len(local) < graph.n_classes:
            raise ScenarioError(f"client {k} keeps only {len(local)} labeled nodes, fewer than "
                                f"{graph.n_classes} classes")
        train, valid, test = stratified_split(graph.labels, local, split, rngmod.stream(seed, "split", k))
        if open_set:
            reach = graph.hop_neighborhood(local, h, allowed=np.concatenate([local, crop]))
            unseen = np.setdiff1d(reach, local)
            seen_lab = ~np.isin(graph.labels[unseen], missing)
            unseen_test, missing_test = unseen[seen_lab], unseen[~seen_lab]
        else:
            reach = graph.hop_neighborhood(local, h)
            unseen = np.union1d(np.setdiff1d(reach, local), excised)
            rest = np.setdiff1d(unseen, excised)
            unseen_test = rest[~np.isin(graph.labels[rest], missing)]
            missing_test = excised
        clients.append(ClientData(k, local, train, valid, test, missing, excised, unseen, unseen_test, missing_test))

    new_nodes = parts[n_clients]
    _, _, new_test = stratified_split(graph.labels, new_nodes, split, rngmod.stream(seed, "split", n_clients))
    return FederatedScenario(n, graph.n_classes, clients, new_nodes, new_test, open_set, crop, h, seed)


# -------------------------------------------------------------- reliability

RELIABILITY_MODES = ("head", "tail", "balanced", "imbalance")


@dataclass(frozen=True)
class ReliabilityConfig:
    """Roles for the data-reliability experiment.

    ``mode`` shapes every contributor's training set; ``imbalance_rate`` is
    only read in ``"imbalance"`` mode.
    """

    receiver: int = 0
    mode: str = "balanced"
    target_class: int = 0
    imbalance_rate: float = 0.0
    lam: float = 3.0

    def __post_init__(self):
        if self.mode not in RELIABILITY_MODES:
            raise ContractError(f"unknown reliability mode {self.mode!r}")
        if not -5.0 <= self.imbalance_rate <= 5.0:
            raise ContractError(f"imbalance rate {self.imbalance_rate} outside [-5, 5]")


def imbalance_count(n_target: int, min_other: int, rate: float) -> int:
    """Per-class count for non-target classes, clamped at zero."""
    return max(0, _round_half_up(n_target + rate / 10.0 * min_other))


def _take(rng, pool: np.ndarray, k: int) -> np.ndarray:
    return np.sort(rng.permutation(pool)[:k]) if k > 0 else np.zeros(0, dtype=np.int64)


def build_reliability_scenario(graph: Graph, n_clients: int, config: ReliabilityConfig,
                               seed: int = 0, split=DEFAULT_SPLIT) -> FederatedScenario:
    """Receiver/contributor scenario: the receiver never trains on the target
    class and is tested on all of its target-class nodes; contributors'
    training sets are reshaped according to ``config.mode``.
    """
    if n_clients < 2:
        raise ContractError("the reliability setup needs a receiver and at least one contributor")
    if not 0 <= config.receiver < n_clients:
        raise ContractError(f"receiver {config.receiver} is not a client id")
    parts = partition_graph(graph, n_clients, seed)
    t = config.target_class
    clients = []
    for k, part in enumerate(parts):
        part = np.sort(part)
        sub = graph.subgraph(part)
        deg = np.zeros(graph.n_nodes, dtype=np.int64)
        deg[part] = sub.degree
        train, valid, test = stratified_split(graph.labels, part, split, rngmod.stream(seed, "split", k))
        if k == config.receiver:
            is_t = graph.labels[part] == t
            if not is_t.any():
                raise ScenarioError(f"receiver {k} holds no node of target class {t}")
            drop = lambda xs: xs[graph.labels[xs] != t]  # noqa: E731
            clients.append(ClientData(k, part, drop(train), drop(valid), part[is_t]))
            continue
        rng = rngmod.stream(seed, "reliability", k)
        labels = graph.labels[train]
        chosen = []
        if config.mode == "imbalance":
            pools = {c: train[labels == c] for c in range(graph.n_classes)}
            others = [len(pools[c]) for c in pools if c != t and len(pools[c])]
            if not len(pools[t]) or not others:
                raise ScenarioError(f"contributor {k} cannot realize class imbalance for target {t}")
            m = min(others)
            n_t = min(len(pools[t]), m // 2)
            if n_t == 0:
                raise ScenarioError(f"contributor {k} has too few nodes for the imbalance mode")
            n_k = imbalance_count(n_t, m, config.imbalance_rate)
            for c, pool in pools.items():
                chosen.append(_take(rng, pool, n_t if c == t else min(n_k, len(pool))))
        else:
            for c in range(graph.n_classes):
                pool = train[labels == c]
                head = pool[deg[pool] > config.lam]
                tail = pool[deg[pool] <= config.lam]
                q = min(len(head), len(tail))
                if c == t and q == 0:
                    raise ScenarioError(f"contributor {k} cannot form a {config.mode}-degree set for class {t}")
                if config.mode == "head":
                    chosen.append(_take(rng, head, q))
                elif config.mode == "tail":
                    chosen.append(_take(rng, tail, q))
                else:
                    chosen.append(_take(rng, head, q // 2))
                    chosen.append(_take(rng, tail, q - q // 2))
        clients.append(ClientData(k, part, np.sort(np.concatenate(chosen)), valid, test))
    return FederatedScenario(graph.n_nodes, graph.n_classes, clients, np.zeros(0, dtype=np.int64),
                             np.zeros(0, dtype=np.int64), seed=seed, kind="reliability",
                             extra={"receiver": config.receiver, "mode": config.mode, "target_class": t,
                                    "imbalance_rate": config.imbalance_rate, "lam": config.lam})


def class_count_table(graph: Graph, scenario: FederatedScenario) -> list[dict]:
    """Per-client, per-class counts shaped like the usual dataset-statistics tables."""
    rows = []
    blocks = [(f"Client {c.client_id}", c) for c in scenario.clients]
    for name, c in blocks:
        tables = {
            "train": class_counts(graph, c.train), "valid": class_counts(graph, c.valid),
            "test": class_counts(graph, c.test), "unseen_node": class_counts(graph, c.unseen_test),
            "missing_class": class_counts(graph, c.missing_test),
        }
        for cls in range(graph.n_classes):
            rows.append({"block": name, "class": cls, **{k: int(v[cls]) for k, v in tables.items()}})
    new = class_counts(graph, scenario.new_client_test) if len(scenario.new_client_test) else np.zeros(graph.n_classes, int)
    for cls in range(graph.n_classes):
        rows.append({"block": "New Client", "class": cls, "train": None, "valid": None, "test": int(new[cls]),
                     "unseen_node": None, "missing_class": None})
    return rows
