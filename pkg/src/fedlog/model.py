"""Local models: a two-layer GraphSAGE encoder feeding either two prototypical
branch classifiers over learnable synthetic nodes (the FedLoG model) or a plain
linear softmax head (the Local and FedAvg baselines).

Parameters live in an ordered ``dict[str, Tensor]``; the insertion order is the
canonical order used for serialization and aggregation.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ContractError, FormatError
from .graphio import Graph
from .tensor import Tensor

HIDDEN = 128
EMBED = 64
DROPOUT = 0.5
BRANCHES = ("head", "tail")


# ---------------------------------------------------------------- parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def encoder_shapes(d: int) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for the encoder in canonical order."""
    return [
        ("enc.l1.self", (d, HIDDEN), d), ("enc.l1.neigh", (d, HIDDEN), d), ("enc.l1.bias", (HIDDEN,), d),
        ("enc.l2.self", (HIDDEN, EMBED), HIDDEN), ("enc.l2.neigh", (HIDDEN, EMBED), HIDDEN),
        ("enc.l2.bias", (EMBED,), HIDDEN),
    ]


def branch_shapes(branch: str) -> list[tuple[str, tuple, int]]:
    e = EMBED
    msg_in = 2 * e + 1
    return [
        (f"{branch}.msg.l1.h", (e, e), msg_in), (f"{branch}.msg.l1.n", (e, e), msg_in),
        (f"{branch}.msg.l1.d", (e,), msg_in), (f"{branch}.msg.l1.bias", (e,), msg_in),
        (f"{branch}.msg.l2.w", (e, e), e), (f"{branch}.msg.l2.bias", (e,), e),
        (f"{branch}.trans.l1.w", (e, e), e), (f"{branch}.trans.l1.bias", (e,), e),
        (f"{branch}.trans.l2.w", (e, e), e), (f"{branch}.trans.l2.bias", (e,), e),
        (f"{branch}.trans.l3.w", (e, 1), e), (f"{branch}.trans.l3.bias", (1,), e),
    ]


def init_params(shapes, rng: np.random.Generator) -> dict[str, Tensor]:
    return {name: Tensor(_uniform(rng, shape, fan), requires_grad=True) for name, shape, fan in shapes}


def count_parameters(params: dict[str, Tensor], names=None) -> int:
    names = params if names is None else names
    return int(sum(params[n].data.size for n in names))


# ------------------------------------------------------------------- encoder


def sage_embed(p: dict, X, adj: sp.spmatrix | None = None, ax=None, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Two SAGE layers: ``act(X W_self + mean_N(X) W_neigh + b)``.

    ReLU follows layer 1 and dropout sits between the layers; layer 2 is
    linear. ``adj`` is the row-normalized adjacency, so an isolated node's
    neighbor mean is zero; ``adj=None`` embeds an edgeless set of nodes.
    ``ax`` may carry a precomputed ``adj @ X`` for constant features.
    """
    h = T.matmul(X, p["enc.l1.self"]) + p["enc.l1.bias"]
    if adj is not None:
        ax = T.spmm(adj, X) if ax is None else ax
        h = h + T.matmul(ax, p["enc.l1.neigh"])
    h = T.dropout(T.relu(h), DROPOUT, rng, train)
    out = T.matmul(h, p["enc.l2.self"]) + p["enc.l2.bias"]
    if adj is not None:
        out = out + T.matmul(T.spmm(adj, h), p["enc.l2.neigh"])
    return out


def pair_embed(p: dict, xa, xb, train: bool = False, rng: np.random.Generator | None = None):
    """Embed many disjoint two-node graphs {a_i, b_i} joined by one edge.

    Returns ``(h_a, h_b)``; identical to :func:`sage_embed` on each pair.
    """
    s1, n1, b1 = p["enc.l1.self"], p["enc.l1.neigh"], p["enc.l1.bias"]
    la = T.relu(T.matmul(xa, s1) + T.matmul(xb, n1) + b1)
    lb = T.relu(T.matmul(xb, s1) + T.matmul(xa, n1) + b1)
    la = T.dropout(la, DROPOUT, rng, train)
    lb = T.dropout(lb, DROPOUT, rng, train)
    s2, n2, b2 = p["enc.l2.self"], p["enc.l2.neigh"], p["enc.l2.bias"]
    ha = T.matmul(la, s2) + T.matmul(lb, n2) + b2
    hb = T.matmul(lb, s2) + T.matmul(la, n2) + b2
    return ha, hb


# ------------------------------------------------------ prototypical branches


def class_mean_matrix(n_classes: int, s: int) -> np.ndarray:
    """(C, C*s) averaging matrix for banks laid out as s consecutive rows per class."""
    return np.kron(np.eye(n_classes), np.full((1, s), 1.0 / s))


def branch_forward(p: dict, branch: str, h, n, protos, mean_matrix: np.ndarray) -> Tensor:
    """Class probabilities (N, C) of one branch classifier.

    Each prototype j sends a message built from ``[h | n | d_j]`` where
    ``d_j = |h - h_j|^2 + |n - h_j|^2``; the transform MLP turns it into a
    scalar gate on ``h - h_j``. The mean gated update shifts ``h`` and the
    shifted embedding is scored by negative squared distance to class means.
    """
    h, n, protos = T.as_tensor(h), T.as_tensor(n), T.as_tensor(protos)
    N, P = h.shape[0], protos.shape[0]
    h3 = T.reshape(h, (N, 1, EMBED))
    n3 = T.reshape(n, (N, 1, EMBED))
    p3 = T.reshape(protos, (1, P, EMBED))
    d = T.sqnorm(h3 - p3) + T.sqnorm(n3 - p3)
    pre = T.matmul(h, p[f"{branch}.msg.l1.h"]) + T.matmul(n, p[f"{branch}.msg.l1.n"]) + p[f"{branch}.msg.l1.bias"]
    m = T.silu(T.reshape(pre, (N, 1, EMBED)) + T.reshape(d, (N, P, 1)) * p[f"{branch}.msg.l1.d"])
    m = T.silu(T.matmul(m, p[f"{branch}.msg.l2.w"]) + p[f"{branch}.msg.l2.bias"])
    a = T.silu(T.matmul(m, p[f"{branch}.trans.l1.w"]) + p[f"{branch}.trans.l1.bias"])
    a = T.matmul(a, p[f"{branch}.trans.l2.w"]) + p[f"{branch}.trans.l2.bias"]
    gate = T.reshape(T.matmul(a, p[f"{branch}.trans.l3.w"]) + p[f"{branch}.trans.l3.bias"], (N, P))
    shift = (h * T.sum(gate, axis=1, keepdims=True) - T.matmul(gate, protos)) / P
    moved = h + shift
    means = T.matmul(mean_matrix, protos)
    C = mean_matrix.shape[0]
    dist = T.sqnorm(T.reshape(moved, (N, 1, EMBED)) - T.reshape(means, (1, C, EMBED)))
    return T.softmax(-dist)


def merge_weight(degree, lam: float) -> np.ndarray:
    """Head-branch weight ``sigmoid(deg - (lam + 1))``."""
    return T.sigmoid_np(np.asarray(degree, dtype=np.float64) - (lam + 1.0))


def merge_branches(p_head, p_tail, alpha) -> Tensor:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
    return T.mul(p_head, alpha) + T.mul(p_tail, 1.0 - alpha)


# -------------------------------------------------------------------- models


class LocalModel:
    """Encoder, head/tail branch classifiers and head/tail synthetic banks.

    ``shared`` names the parameters exchanged with the server (everything but
    the banks).
    """

    kind = "fedlog"

    def __init__(self, params: dict[str, Tensor], n_classes: int, s: int, lam: float):
        self.params = params
        self.n_classes = n_classes
        self.s = s
        self.lam = lam
        self.bank_labels = np.repeat(np.arange(n_classes), s)
        self.mean_matrix = class_mean_matrix(n_classes, s)
        self.shared = [k for k in params if not k.startswith("bank.")]

    @classmethod
    def initialize(cls, feature_dim: int, n_classes: int, s: int = 20, lam: float = 3.0,
                   rng: np.random.Generator | None = None, bank_rng: np.random.Generator | None = None,
                   bank_std: float = 0.01) -> "LocalModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        bank_rng = bank_rng if bank_rng is not None else rng
        shapes = encoder_shapes(feature_dim) + branch_shapes("head") + branch_shapes("tail")
        params = init_params(shapes, rng)
        for b in BRANCHES:
            params[f"bank.{b}"] = Tensor(bank_rng.normal(0.0, bank_std, (n_classes * s, feature_dim)),
                                         requires_grad=True)
        return cls(params, n_classes, s, lam)

    @property
    def feature_dim(self) -> int:
        return self.params["enc.l1.self"].shape[0]

    def clone(self) -> "LocalModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return type(self)(params, self.n_classes, self.s, self.lam)

    def prototypes(self, train: bool = False, rng=None) -> dict[str, Tensor]:
        return {b: sage_embed(self.params, self.params[f"bank.{b}"], None, train=train, rng=rng) for b in BRANCHES}

    def merged_proba(self, h, n, alpha, protos) -> Tensor:
        ph = branch_forward(self.params, "head", h, n, protos["head"], self.mean_matrix)
        pt = branch_forward(self.params, "tail", h, n, protos["tail"], self.mean_matrix)
        return merge_branches(ph, pt, alpha)

    def norm_penalty(self) -> Tensor:
        return T.sum(T.norm(self.params["bank.head"])) + T.sum(T.norm(self.params["bank.tail"]))

    def fitting_loss(self, graph: Graph, nodes, beta: float = 0.1, train: bool = True, rng=None) -> Tensor:
        """Summed cross-entropy of the degree-merged prediction plus ``beta`` times
        the summed row norms of both banks."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            raise ContractError("fitting loss needs at least one training node")
        H = sage_embed(self.params, graph.features, graph.mean_adjacency, graph.neighbor_feature_mean, train, rng)
        h = T.gather_rows(H, nodes)
        n = T.spmm(graph.mean_adjacency[nodes], H)
        protos = self.prototypes(train, rng)
        p = self.merged_proba(h, n, merge_weight(graph.degree[nodes], self.lam), protos)
        ce = -T.sum(T.log(T.pick(p, graph.labels[nodes])))
        return ce + T.scale(self.norm_penalty(), beta) if beta else ce

    def synthetic_loss(self, x_syn: np.ndarray, x_prompt: np.ndarray, labels, train: bool = True, rng=None) -> Tensor:
        """Cross-entropy on synthetic nodes, each attached to its prompt node,
        with the branch weight fixed at 0.5."""
        h, n = pair_embed(self.params, x_syn, x_prompt, train, rng)
        protos = self.prototypes(train, rng)
        p = self.merged_proba(h, n, np.full(len(x_syn), 0.5), protos)
        return -T.sum(T.log(T.pick(p, labels)))

    def predict_proba(self, graph: Graph, nodes, fixed_alpha: float | None = None, chunk: int = 256) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        H = sage_embed(self.params, graph.features, graph.mean_adjacency, graph.neighbor_feature_mean).data
        protos = {k: v.data for k, v in self.prototypes().items()}
        Nb = np.asarray(graph.mean_adjacency @ H)
        deg = graph.degree
        out = np.zeros((len(nodes), self.n_classes))
        for i in range(0, len(nodes), chunk):
            idx = nodes[i:i + chunk]
            alpha = np.full(len(idx), fixed_alpha) if fixed_alpha is not None else merge_weight(deg[idx], self.lam)
            out[i:i + chunk] = self.merged_proba(H[idx], Nb[idx], alpha, protos).data
        return out

    def meta(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes, "s": self.s, "lam": self.lam}


class BaselineModel:
    """Encoder plus linear softmax head.

    ``class_mask`` restricts the output to the given classes; the Local
    baseline uses the classes seen in its training labels, so a class it
    never observed can never be predicted.
    """

    kind = "baseline"

    def __init__(self, params: dict[str, Tensor], n_classes: int, class_mask=None):
        self.params = params
        self.n_classes = n_classes
        self.class_mask = None if class_mask is None else np.asarray(class_mask, dtype=bool)
        self.shared = list(params)

    @classmethod
    def initialize(cls, feature_dim: int, n_classes: int, rng: np.random.Generator | None = None,
                   class_mask=None) -> "BaselineModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = encoder_shapes(feature_dim) + [("head.w", (EMBED, n_classes), EMBED), ("head.bias", (n_classes,), EMBED)]
        return cls(init_params(shapes, rng), n_classes, class_mask)

    @property
    def feature_dim(self) -> int:
        return self.params["enc.l1.self"].shape[0]

    def clone(self) -> "BaselineModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return type(self)(params, self.n_classes, self.class_mask)

    def _logits(self, H) -> Tensor:
        z = T.matmul(H, self.params["head.w"]) + self.params["head.bias"]
        if self.class_mask is not None:
            z = z + np.where(self.class_mask, 0.0, -1e30)
        return z

    def fitting_loss(self, graph: Graph, nodes, beta: float = 0.0, train: bool = True, rng=None) -> Tensor:
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            raise ContractError("fitting loss needs at least one training node")
        H = sage_embed(self.params, graph.features, graph.mean_adjacency, graph.neighbor_feature_mean, train, rng)
        z = self._logits(T.gather_rows(H, nodes))
        return -T.sum(T.pick(T.log_softmax(z), graph.labels[nodes]))

    def predict_proba(self, graph: Graph, nodes, fixed_alpha=None, chunk: int = 0) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        H = sage_embed(self.params, graph.features, graph.mean_adjacency, graph.neighbor_feature_mean).data
        return T.softmax(self._logits(H[nodes])).data

    def meta(self) -> dict:
        mask = None if self.class_mask is None else [bool(x) for x in self.class_mask]
        return {"kind": self.kind, "n_classes": self.n_classes, "class_mask": mask}


def predict(model, graph: Graph, nodes, fixed_alpha: float | None = None) -> np.ndarray:
    """Argmax class per node, in eval mode (no dropout)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(model.predict_proba(graph, nodes, fixed_alpha), axis=1)


def accuracy(model, graph: Graph, nodes) -> float | None:
    """Fraction of ``nodes`` predicted correctly; ``None`` for an empty set."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return None
    return float(np.mean(predict(model, graph, nodes) == graph.labels[nodes]))


def per_class_accuracy(model, graph: Graph, nodes, n_classes: int) -> np.ndarray:
    """Accuracy per class over ``nodes``; NaN for classes with no node."""
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.full(n_classes, np.nan)
    if len(nodes) == 0:
        return out
    hit = predict(model, graph, nodes) == graph.labels[nodes]
    for c in range(n_classes):
        sel = graph.labels[nodes] == c
        if sel.any():
            out[c] = float(hit[sel].mean())
    return out


# ------------------------------------------------------------ serialization

_MAGIC = "fedlog-params/1"


def pack_arrays(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """8-byte little-endian header length, JSON header, then float64 LE payload
    in the dict's order."""
    names = list(arrays)
    header = {
        "format": _MAGIC,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    return struct.pack("<Q", len(hb)) + hb + payload


def unpack_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise FormatError("parameter blob shorter than its header length field")
    (hlen,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"parameter header is not valid JSON: {exc}") from None
    if header.get("format") != _MAGIC:
        raise FormatError(f"unknown parameter format {header.get('format')!r}")
    out = {}
    pos = 8 + hlen
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(blob):
            raise FormatError(f"parameter payload truncated at tensor {t['name']!r}")
        out[t["name"]] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(blob):
        raise FormatError("trailing bytes after parameter payload")
    return out, header["meta"]


def model_to_bytes(model) -> bytes:
    return pack_arrays({k: v.data for k, v in model.params.items()}, model.meta())


def model_from_bytes(blob: bytes):
    arrays, meta = unpack_arrays(blob)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    kind = meta.get("kind")
    if kind == LocalModel.kind:
        return LocalModel(params, int(meta["n_classes"]), int(meta["s"]), float(meta["lam"]))
    if kind == BaselineModel.kind:
        return BaselineModel(params, int(meta["n_classes"]), meta.get("class_mask"))
    raise FormatError(f"unknown model kind {kind!r}")
