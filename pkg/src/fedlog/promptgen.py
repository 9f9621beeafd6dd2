"""Prompt generators.

A prompt generator maps a node feature to the feature of a single virtual
neighbor (the prompt node) such that training on the two-node graph
``{v, prompt(v)}`` produces nearly the same encoder gradients as training on
v's real h-hop subgraph. Each client pretrains one generator; the server
mixes them into one frozen generator per class.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ContractError, FormatError
from .graphio import Graph
from .model import BaselineModel, encoder_shapes, init_params, pack_arrays, pair_embed, unpack_arrays
from .tensor import Tensor

log = logging.getLogger(__name__)

PG_HIDDEN = 256


class PromptGenerator:
    """MLP d -> 256 -> 256 -> d with SiLU after both hidden layers."""

    NAMES = ("l1.w", "l1.bias", "l2.w", "l2.bias", "l3.w", "l3.bias")

    def __init__(self, params: dict[str, Tensor], frozen: bool = False):
        self.params = params
        self.frozen = frozen
        if frozen:
            for p in params.values():
                p.requires_grad = False

    @classmethod
    def initialize(cls, feature_dim: int, rng: np.random.Generator, hidden: int = PG_HIDDEN) -> "PromptGenerator":
        d = feature_dim
        shapes = [("l1.w", (d, hidden), d), ("l1.bias", (hidden,), d),
                  ("l2.w", (hidden, hidden), hidden), ("l2.bias", (hidden,), hidden),
                  ("l3.w", (hidden, d), hidden), ("l3.bias", (d,), hidden)]
        return cls(init_params(shapes, rng))

    @property
    def feature_dim(self) -> int:
        return self.params["l1.w"].shape[0]

    def forward(self, x) -> Tensor:
        p = self.params
        a = T.silu(T.matmul(x, p["l1.w"]) + p["l1.bias"])
        a = T.silu(T.matmul(a, p["l2.w"]) + p["l2.bias"])
        return T.matmul(a, p["l3.w"]) + p["l3.bias"]

    def __call__(self, x) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64)).data

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def fingerprint(self) -> str:
        return hashlib.sha256(pack_arrays(self.arrays())).hexdigest()


# ------------------------------------------------------ gradient matching


def _flat(arrays: dict[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([arrays[n].ravel() for n in names])


def _unflat(vec: np.ndarray, like: dict[str, np.ndarray], names) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[pos:pos + size].reshape(like[n].shape)
        pos += size
    return out


def hvp_fd(grad_x, phi: np.ndarray, u: np.ndarray, rel_step: float = 1e-3) -> np.ndarray:
    """Directional derivative of ``grad_x(phi)`` along ``u`` by central differences.

    With ``grad_x = d l / d x`` this is ``(d^2 l / dx dphi) u``, the
    mixed second derivative contracted with ``u``. The step is
    ``rel_step / |u|``; a zero direction returns zeros exactly.
    """
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        return np.zeros_like(np.asarray(grad_x(phi)))
    eps = rel_step / nu
    return (np.asarray(grad_x(phi + eps * u)) - np.asarray(grad_x(phi - eps * u))) / (2.0 * eps)


@dataclass
class _Item:
    """A pretraining node together with its h-hop neighborhood."""

    node: int
    x: np.ndarray
    y: int
    xbar: np.ndarray
    sub: Graph


def _items(graph: Graph, nodes, h: int) -> tuple[list[_Item], int]:
    items, skipped = [], 0
    for v in np.asarray(nodes, dtype=np.int64):
        hop = graph.hop_neighborhood([v], h)
        others = hop[hop != v]
        if len(others) == 0:
            skipped += 1
            continue
        sub = graph.subgraph(np.concatenate([[v], others]))
        items.append(_Item(int(v), graph.features[v], int(graph.labels[v]), graph.features[others].mean(axis=0), sub))
    return items, skipped


class GradientMatcher:
    """Encoder gradients for real subgraphs versus two-node prompt graphs,
    under one randomly initialized encoder plus linear head."""

    def __init__(self, init: BaselineModel):
        self.model = init
        self.names = [n for n, _, _ in encoder_shapes(init.feature_dim)]
        self.base = {k: v.data for k, v in init.params.items()}
        self.phi = _flat(self.base, self.names)

    def _params(self, phi: np.ndarray, track: bool) -> dict[str, Tensor]:
        enc = _unflat(phi, self.base, self.names)
        p = {k: Tensor(enc[k], requires_grad=track) for k in self.names}
        p["head.w"] = Tensor(self.base["head.w"])
        p["head.bias"] = Tensor(self.base["head.bias"])
        return p

    @staticmethod
    def _pair_loss(p, xv, xp, y) -> Tensor:
        ha, _ = pair_embed(p, xv, xp)
        z = T.matmul(ha, p["head.w"]) + p["head.bias"]
        return -T.sum(T.pick(T.log_softmax(z), [y]))

    def true_gradient(self, item: _Item) -> np.ndarray:
        p = self._params(self.phi, True)
        model = BaselineModel(p, self.model.n_classes)
        with T.Tape() as tape:
            loss = model.fitting_loss(item.sub, [0], train=False)
        return np.concatenate([g.ravel() for g in tape.gradient(loss, [p[n] for n in self.names])])

    def synthetic_gradient(self, item: _Item, xp: np.ndarray) -> np.ndarray:
        p = self._params(self.phi, True)
        with T.Tape() as tape:
            loss = self._pair_loss(p, item.x[None], xp[None], item.y)
        return np.concatenate([g.ravel() for g in tape.gradient(loss, [p[n] for n in self.names])])

    def prompt_gradient(self, phi: np.ndarray, item: _Item, xp: np.ndarray) -> np.ndarray:
        """d l / d x_p of the two-node loss at encoder parameters ``phi``."""
        p = self._params(phi, False)
        xt = Tensor(xp[None], requires_grad=True)
        with T.Tape() as tape:
            loss = self._pair_loss(p, item.x[None], xt, item.y)
        return tape.gradient(loss, [xt])[0][0]

    def match(self, item: _Item, xp: np.ndarray, g_true: np.ndarray | None = None,
              rel_step: float = 1e-3) -> tuple[float, np.ndarray]:
        """``(|g_syn - g_true|^2, d/dx_p of it)`` for one node under this init."""
        g_true = self.true_gradient(item) if g_true is None else g_true
        diff = self.synthetic_gradient(item, xp) - g_true
        u = 2.0 * diff
        grad = hvp_fd(lambda phi: self.prompt_gradient(phi, item, xp), self.phi, u, rel_step)
        return float(diff @ diff), grad


def grad_match_backward(matchers: list[GradientMatcher], items: list[_Item], xp: np.ndarray,
                        g_true: dict | None = None) -> tuple[float, np.ndarray]:
    """Mean gradient-matching loss over (item, init) pairs and its gradient
    with respect to each prompt feature (rows of ``xp``)."""
    total = 0.0
    grad = np.zeros_like(xp)
    scale = 1.0 / (len(items) * len(matchers))
    for i, item in enumerate(items):
        for j, m in enumerate(matchers):
            gt = None if g_true is None else g_true.get((item.node, j))
            val, g = m.match(item, xp[i], gt)
            total += val * scale
            grad[i] += g * scale
    return total, grad


def pretrain_objective(pg: PromptGenerator, items: list[_Item], matchers: list[GradientMatcher],
                       g_true: dict | None = None) -> tuple[float, float, dict[str, np.ndarray]]:
    """Both pretraining losses, plus the gradient of their sum with respect to
    the generator parameters."""
    X = np.stack([it.x for it in items])
    xbar = np.stack([it.xbar for it in items])
    with T.Tape() as tape:
        out = pg.forward(X)
        feat = T.mean(T.sqnorm(out - xbar))
        if matchers:
            lg, gx = grad_match_backward(matchers, items, out.data, g_true)
            surrogate = feat + T.sum(out * gx)
        else:
            lg, surrogate = 0.0, feat
    grads = T.backward(surrogate, pg.params, tape)
    return feat.item(), lg, grads


@dataclass
class PretrainReport:
    epochs: list = field(default_factory=list)
    skipped: int = 0
    used: int = 0

    def as_dict(self) -> dict:
        return {"epochs": self.epochs, "skipped": self.skipped, "used": self.used}


def pretrain_generator(graph: Graph, nodes, h: int = 2, n_inits: int = 20, epochs: int = 100, seed: int = 0,
                       client: int = 0, lr: float = 1e-3, batch_size: int = 32,
                       grad_matching: bool = True) -> tuple[PromptGenerator, PretrainReport]:
    """Pretrain one client's generator on its training nodes.

    Each epoch draws ``n_inits`` fresh encoder+head initializations, shuffles
    the usable nodes and takes one Adam step per minibatch on
    ``L_feat + L_grad``. Nodes without any neighbor within ``h`` hops are
    skipped and counted in the report.
    """
    if h < 1:
        raise ContractError(f"prompt generator radius must be >= 1, got {h}")
    if n_inits < 1:
        raise ContractError(f"need at least one random initialization, got {n_inits}")
    items, skipped = _items(graph, nodes, h)
    if not items:
        raise ContractError("no training node has a neighbor within the hop radius")
    pg = PromptGenerator.initialize(graph.feature_dim, rngmod.stream(seed, "pg-init", client))
    opt = T.Adam(lr=lr)
    report = PretrainReport(skipped=skipped, used=len(items))
    for epoch in range(epochs):
        rng = rngmod.stream(seed, "pg-epoch", client, epoch)
        matchers = []
        if grad_matching:
            matchers = [GradientMatcher(BaselineModel.initialize(graph.feature_dim, graph.n_classes, rng))
                        for _ in range(n_inits)]
        order = rng.permutation(len(items))
        sums = np.zeros(2)
        for start in range(0, len(order), batch_size):
            batch = [items[i] for i in order[start:start + batch_size]]
            feat, lg, grads = pretrain_objective(pg, batch, matchers)
            opt.step(pg.params, grads)
            sums += np.array([feat, lg]) * len(batch)
        feat, lg = sums / len(items)
        report.epochs.append({"epoch": epoch, "feat": float(feat), "grad": float(lg), "total": float(feat + lg)})
    return pg, report


# --------------------------------------------------------------- server side


def aggregate_generators(generators: list[PromptGenerator], rates) -> list[PromptGenerator]:
    """One frozen generator per class: the rate-weighted mean of client
    generators, falling back to the plain mean for a class no client holds."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.ndim != 2 or rates.shape[0] != len(generators):
        raise ContractError(f"rates shape {rates.shape} does not match {len(generators)} generators")
    names = list(generators[0].params)
    for g in generators[1:]:
        if list(g.params) != names or any(g.params[n].shape != generators[0].params[n].shape for n in names):
            raise ContractError("prompt generators do not share one architecture")
    out = []
    for c in range(rates.shape[1]):
        w = rates[:, c]
        if w.sum() <= 0:
            log.warning("class %d has zero rate at every client; using the unweighted mean generator", c)
            w = np.ones(len(generators))
        w = w / w.sum()
        params = {n: Tensor(sum(wk * g.params[n].data for wk, g in zip(w, generators))) for n in names}
        out.append(PromptGenerator(params, frozen=True))
    return out


def generate_prompt(generator: PromptGenerator, x) -> np.ndarray:
    return generator(x)


def generate_prompts(generators: list[PromptGenerator], x: np.ndarray, labels) -> np.ndarray:
    """Prompt feature for every row of ``x`` using its class's generator."""
    labels = np.asarray(labels)
    out = np.zeros_like(x)
    for c in np.unique(labels):
        sel = labels == c
        out[sel] = generators[int(c)](x[sel])
    return out


@dataclass
class PromptGeneratorBank:
    """Client generators plus the class rates they were trained under."""

    generators: list
    rates: np.ndarray
    reports: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        arrays = {}
        for k, g in enumerate(self.generators):
            for n, a in g.arrays().items():
                arrays[f"client{k}/{n}"] = a
        meta = {"kind": "prompt-bank", "n_clients": len(self.generators),
                "rates": np.asarray(self.rates).tolist(), "reports": self.reports}
        return pack_arrays(arrays, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PromptGeneratorBank":
        arrays, meta = unpack_arrays(blob)
        if meta.get("kind") != "prompt-bank":
            raise FormatError("file is not a prompt-generator bank")
        gens = []
        for k in range(int(meta["n_clients"])):
            params = {n: Tensor(arrays[f"client{k}/{n}"], requires_grad=True) for n in PromptGenerator.NAMES}
            gens.append(PromptGenerator(params))
        return cls(gens, np.asarray(meta["rates"], dtype=np.float64), meta.get("reports", []))
