"""Round protocol for FedLoG and the Local / FedAvg baselines.

One round: every client starts from the global shared parameters (after
round 0), takes its local fitting steps and, for FedLoG from round 1 on, a
generalization step on the server's global synthetic data. The server then
averages the shared parameters and rebuilds the global synthetic data from
the clients' synthetic banks.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ContractError, ProtocolError
from .graphio import Graph, class_rates
from .model import (BaselineModel, LocalModel, accuracy, count_parameters, model_from_bytes, model_to_bytes,
                    pack_arrays, per_class_accuracy, unpack_arrays)
from .partition import FederatedScenario
from .promptgen import PromptGeneratorBank, aggregate_generators, generate_prompts, pretrain_generator

log = logging.getLogger(__name__)

ALGORITHMS = ("FedLoG", "FedAvg", "Local")
VARIANTS = ("HH", "HT", "TH", "TT")
SETTINGS = ("SeenGraph", "UnseenNode", "MissingClass", "NewClient")
NOISES = ("none", "GN", "RP")
METRIC_FIELDS = ["round", "client", "algorithm", "setting", "split", "accuracy", "loss", "upload_bytes",
                 "download_bytes"]
BYTES_PER_PARAM = 4


# ------------------------------------------------------------ server pieces


def aggregate_models(shared: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Unweighted element-wise mean of the clients' shared parameters.

    The mean is anchored on the first client, ``x_0 + sum_k (x_k - x_0) / K``,
    summed in ascending client order; identical inputs come back bit-exact.
    """
    if not shared:
        raise ContractError("nothing to aggregate")
    names = list(shared[0])
    for s in shared[1:]:
        if list(s) != names or any(s[n].shape != shared[0][n].shape for n in names):
            raise ContractError("client models do not share one architecture")
    out = {}
    for n in names:
        base = shared[0][n]
        acc = np.zeros_like(base)
        for s in shared[1:]:
            acc = acc + (s[n] - base)
        out[n] = base + acc / len(shared)
    return out


@dataclass
class GlobalSyntheticData:
    features: np.ndarray
    labels: np.ndarray
    variant: str


def synthetic_weights(rates: np.ndarray, variant: str, eps: float = 1e-8, warn: bool = True) -> np.ndarray:
    """(K, C) per-class client weights, each column summing to one.

    Head-class variants (HH, HT) weight a client by its rate of the class;
    tail-class variants (TH, TT) by ``sum_j r_j / (r_k + eps)``. A class with
    zero rate everywhere falls back to equal weights.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if variant in ("HH", "HT"):
        w = rates.copy()
    elif variant in ("TH", "TT"):
        w = rates.sum(axis=0, keepdims=True) / (rates + eps)
    else:
        raise ContractError(f"unknown synthetic-data variant {variant!r}")
    tot = w.sum(axis=0, keepdims=True)
    empty = tot[0] <= 0
    if empty.any():
        if warn:
            log.warning("classes %s have zero rate at every client; averaging their banks uniformly",
                        np.flatnonzero(empty).tolist())
        w[:, empty] = 1.0
        tot = w.sum(axis=0, keepdims=True)
    return w / tot


def generate_global_synthetic(head_banks, tail_banks, rates, variant: str = "HH", s: int = 20,
                              eps: float = 1e-8, warn: bool = True) -> GlobalSyntheticData:
    """Per-class weighted combination of client banks (rows laid out s per class)."""
    banks = head_banks if variant[1] == "H" else tail_banks
    banks = [np.asarray(b, dtype=np.float64) for b in banks]
    shape = banks[0].shape
    if any(b.shape != shape for b in banks):
        raise ContractError("client synthetic banks differ in shape")
    w = synthetic_weights(rates, variant, eps, warn)
    row_class = np.repeat(np.arange(w.shape[1]), s)
    if len(row_class) != shape[0]:
        raise ContractError(f"bank has {shape[0]} rows, expected {len(row_class)}")
    out = np.zeros(shape)
    for k, b in enumerate(banks):
        out += w[k, row_class][:, None] * b
    return GlobalSyntheticData(out, row_class, variant)


def feature_scale(features: np.ndarray, labels, gamma) -> np.ndarray:
    """Move each class-c row toward the mean of all rows by ``gamma[c]``."""
    features = np.asarray(features, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)[np.asarray(labels)][:, None]
    return features + g * (features.mean(axis=0, keepdims=True) - features)


def update_adaptive_factor(gamma, acc, tau: float = 0.9, step: float = 0.001) -> np.ndarray:
    """Raise ``gamma[c]`` by ``step`` (capped at 1) where class accuracy exceeds ``tau``.

    Classes without validation nodes (NaN accuracy) are left unchanged.
    """
    gamma = np.asarray(gamma, dtype=np.float64).copy()
    acc = np.asarray(acc, dtype=np.float64)
    hit = np.nan_to_num(acc, nan=-1.0) > tau
    gamma[hit] = np.minimum(1.0, gamma[hit] + step)
    return gamma


@dataclass
class NoisyRates:
    rates: np.ndarray
    mechanism: str


def noise_rates(rates, mechanism: str = "none", a: float = 0.0, rng: np.random.Generator | None = None) -> NoisyRates:
    """Privacy perturbation of one client's class rates.

    ``GN`` adds N(0, (a r_c)^2) per class and clamps at zero; ``RP`` shuffles
    the rates within the head classes (above the client's median rate) and
    within the remaining tail classes. No renormalization is applied.
    """
    r = np.asarray(rates, dtype=np.float64).copy()
    if mechanism == "none":
        return NoisyRates(r, "none")
    if rng is None:
        raise ContractError("noise mechanisms need a seeded generator")
    if mechanism == "GN":
        if a < 0:
            raise ContractError(f"noise scale must be >= 0, got {a}")
        return NoisyRates(np.maximum(0.0, r + rng.normal(0.0, 1.0, r.shape) * (a * r)), f"GN({a})")
    if mechanism == "RP":
        head = r > np.median(r)
        out = r.copy()
        for group in (np.flatnonzero(head), np.flatnonzero(~head)):
            out[group] = r[rng.permutation(group)]
        return NoisyRates(out, "RP")
    raise ContractError(f"unknown noise mechanism {mechanism!r}")


# ------------------------------------------------------------------- ledger


def round_bytes(algorithm: str, n_params: int, s: int, n_classes: int, d: int) -> int:
    """Upload plus download bytes for one client in one round."""
    if algorithm == "Local":
        return 0
    extra = s * n_classes * d if algorithm == "FedLoG" else 0
    return 2 * BYTES_PER_PARAM * (n_params + extra)


@dataclass
class CommLedger:
    rows: list = field(default_factory=list)

    def record(self, rnd: int, client: int, upload: int, download: int) -> None:
        self.rows.append((rnd, client, int(upload), int(download)))

    def round_total(self, rnd: int) -> int:
        return int(sum(u + d for r, _, u, d in self.rows if r == rnd))

    def client_round(self, rnd: int, client: int) -> int:
        return int(sum(u + d for r, c, u, d in self.rows if r == rnd and c == client))

    @property
    def total_bytes(self) -> int:
        return int(sum(u + d for _, _, u, d in self.rows))

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 1e6

    @staticmethod
    def rounds_to_target(accuracies, target: float) -> int | None:
        """First round (0-based) whose accuracy reaches ``target``."""
        for i, a in enumerate(accuracies):
            if a is not None and a >= target:
                return i
        return None


# ----------------------------------------------------------------- settings


@dataclass
class RunSettings:
    algorithm: str = "FedLoG"
    rounds: int = 100
    epochs: int = 1
    s: int = 20
    lam: float = 3.0
    beta: float = 0.1
    tau: float = 0.9
    gamma_step: float = 0.001
    variant: str = "HH"
    lr: float = 1e-3
    batch_size: int | None = None
    noise: str = "none"
    noise_a: float = 0.0
    eps: float = 1e-8
    bank_std: float = 0.01

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.noise not in NOISES:
            raise ContractError(f"unknown noise mechanism {self.noise!r}")
        if self.rounds < 1 or self.epochs < 1 or self.s < 1:
            raise ContractError("rounds and epochs must be positive, as must s")


# ----------------------------------------------------------- scenario views


class ScenarioGraphs:
    """Induced graphs for every role of a scenario, with global-to-local maps."""

    def __init__(self, graph: Graph, scenario: FederatedScenario):
        self.graph = graph
        self.scenario = scenario
        self._cache: dict = {}

    def _view(self, key, nodes):
        if key not in self._cache:
            nodes = np.asarray(nodes, dtype=np.int64)
            pos = np.full(self.graph.n_nodes, -1, dtype=np.int64)
            pos[nodes] = np.arange(len(nodes))
            self._cache[key] = (self.graph.subgraph(nodes), pos)
        return self._cache[key]

    def local(self, k: int):
        return self._view(("local", k), self.scenario.clients[k].nodes)

    def expanded(self, k: int):
        c = self.scenario.clients[k]
        return self._view(("expanded", k), np.union1d(c.nodes, c.unseen))

    def new_client(self):
        return self._view(("new",), self.scenario.new_client_nodes)

    def rates(self, k: int) -> np.ndarray:
        return class_rates(self.graph, self.scenario.clients[k].train)


# ------------------------------------------------------------ client state


@dataclass
class ClientState:
    client_id: int
    model: object
    opt: T.Adam
    gamma: np.ndarray
    graph: Graph
    train: np.ndarray
    valid: np.ndarray
    best_acc: float = -1.0
    best_round: int = -1
    best_arrays: dict | None = None
    last_loss: float = float("nan")
    last_valid: float | None = None


def _load_shared(model, shared: dict[str, np.ndarray]) -> None:
    for n, a in shared.items():
        model.params[n].data = a.copy()


def _batches(nodes: np.ndarray, batch_size: int | None, rng: np.random.Generator):
    if not batch_size or batch_size >= len(nodes):
        yield nodes
        return
    order = rng.permutation(nodes)
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _step(model, opt: T.Adam, loss_fn) -> float:
    with T.Tape() as tape:
        loss = loss_fn()
    opt.step(model.params, T.backward(loss, model.params, tape))
    return loss.item()


def local_round(state: ClientState, rnd: int, settings: RunSettings, seed: int,
                global_shared: dict | None = None, synthetic: GlobalSyntheticData | None = None,
                generators: list | None = None) -> ClientState:
    """Fitting, then (FedLoG, round >= 1) generalization, then the gamma update."""
    model = state.model
    if global_shared is not None:
        _load_shared(model, global_shared)
    rng = rngmod.stream(seed, "local", state.client_id, rnd)
    generalize = settings.algorithm == "FedLoG" and rnd >= 1
    if generalize and (synthetic is None or generators is None):
        raise ProtocolError(f"client {state.client_id}: round {rnd} needs global synthetic data and prompt generators")
    total = 0.0
    for _ in range(settings.epochs):
        for batch in _batches(state.train, settings.batch_size, rng):
            total += _step(model, state.opt, lambda: model.fitting_loss(state.graph, batch, settings.beta, True, rng))
        if generalize:
            x = feature_scale(synthetic.features, synthetic.labels, state.gamma)
            xp = generate_prompts(generators, x, synthetic.labels)
            total += _step(model, state.opt, lambda: model.synthetic_loss(x, xp, synthetic.labels, True, rng))
    state.last_loss = total / settings.epochs
    if settings.algorithm == "FedLoG":
        acc = per_class_accuracy(model, state.graph, state.valid, model.n_classes)
        state.gamma = update_adaptive_factor(state.gamma, acc, settings.tau, settings.gamma_step)
    state.last_valid = accuracy(model, state.graph, state.valid)
    score = -1.0 if state.last_valid is None else state.last_valid
    if score > state.best_acc:
        state.best_acc, state.best_round = score, rnd
        state.best_arrays = {k: v.data.copy() for k, v in model.params.items()}
    return state


# ---------------------------------------------------------------- protocol


@dataclass
class RunResult:
    settings: RunSettings
    seed: int
    best_models: list
    final_models: list
    global_model: object
    ledger: CommLedger
    metrics: list
    gammas: list
    synthetic: GlobalSyntheticData | None
    rates: list

    best_meta: list = field(default_factory=list)


def pretrain_bank(graph: Graph, scenario: FederatedScenario, h: int = 2, n_inits: int = 20, epochs: int = 100,
                  seed: int = 0, lr: float = 1e-3, batch_size: int = 32, workers: int = 1) -> PromptGeneratorBank:
    """Pretrain one prompt generator per client on its local graph and training nodes."""
    views = ScenarioGraphs(graph, scenario)

    def job(k):
        g, pos = views.local(k)
        return pretrain_generator(g, pos[scenario.clients[k].train], h, n_inits, epochs, seed, k, lr, batch_size)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        out = list(ex.map(job, range(scenario.n_clients)))
    rates = np.stack([views.rates(k) for k in range(scenario.n_clients)])
    return PromptGeneratorBank([g for g, _ in out], rates, [r.as_dict() for _, r in out])


def _new_model(settings: RunSettings, graph: Graph, seed: int, k: int, mask=None):
    init = rngmod.stream(seed, "init")
    if settings.algorithm == "FedLoG":
        return LocalModel.initialize(graph.feature_dim, graph.n_classes, settings.s, settings.lam, init,
                                     rngmod.stream(seed, "bank", k), settings.bank_std)
    return BaselineModel.initialize(graph.feature_dim, graph.n_classes, init, mask)


def _state_blob(states, rnd, global_shared, synthetic) -> bytes:
    arrays, meta = {}, {"round": rnd, "clients": []}
    for st in states:
        k = st.client_id
        for n, t in st.model.params.items():
            arrays[f"c{k}/model/{n}"] = t.data
        for n, a in st.opt.state_arrays().items():
            arrays[f"c{k}/opt/{n}"] = a
        arrays[f"c{k}/gamma"] = st.gamma
        for n, a in (st.best_arrays or {}).items():
            arrays[f"c{k}/best/{n}"] = a
        meta["clients"].append({"id": k, "best_acc": st.best_acc, "best_round": st.best_round,
                                "last_loss": st.last_loss, "last_valid": st.last_valid})
    for n, a in (global_shared or {}).items():
        arrays[f"global/{n}"] = a
    if synthetic is not None:
        arrays["synthetic/features"] = synthetic.features
    return pack_arrays(arrays, meta)


def _restore(blob: bytes, states):
    arrays, meta = unpack_arrays(blob)
    for st, info in zip(states, meta["clients"]):
        k = st.client_id
        for n in st.model.params:
            st.model.params[n].data = arrays[f"c{k}/model/{n}"].copy()
        st.opt.load_state_arrays({n[len(f"c{k}/opt/"):]: a for n, a in arrays.items() if n.startswith(f"c{k}/opt/")})
        st.gamma = arrays[f"c{k}/gamma"].copy()
        best = {n[len(f"c{k}/best/"):]: a.copy() for n, a in arrays.items() if n.startswith(f"c{k}/best/")}
        st.best_arrays = best or None
        st.best_acc, st.best_round = info["best_acc"], info["best_round"]
        st.last_loss, st.last_valid = info["last_loss"], info["last_valid"]
    shared = {n[len("global/"):]: a for n, a in arrays.items() if n.startswith("global/")} or None
    return meta["round"], shared, arrays.get("synthetic/features")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_metrics(path: Path, rows: list) -> None:
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def _truncate_metrics(path: Path, last_round: int) -> None:
    if not path.exists():
        return
    with path.open(encoding="utf-8") as f:
        lines = f.read().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_round]
    path.write_text("\n".join(kept) + "\n", encoding="utf-8")


def run_protocol(graph: Graph, scenario: FederatedScenario, settings: RunSettings, seed: int = 0,
                 bank: PromptGeneratorBank | None = None, out_dir=None, workers: int = 1, resume: bool = False,
                 stop_after: int | None = None) -> RunResult:
    """Run ``settings.rounds`` rounds and keep each client's best-validation checkpoint.

    With ``out_dir`` the run appends to ``metrics.csv`` and saves a resumable
    state after each round; ``resume`` continues from that state.
    ``stop_after`` ends the run early after the given round (used to
    simulate an interruption).
    """
    K, C, d = scenario.n_clients, graph.n_classes, graph.feature_dim
    alg = settings.algorithm
    views = ScenarioGraphs(graph, scenario)
    raw_rates = [views.rates(k) for k in range(K)]
    rates = np.stack([noise_rates(r, settings.noise, settings.noise_a, rngmod.stream(seed, "noise", k)).rates
                      for k, r in enumerate(raw_rates)])
    generators = None
    if alg == "FedLoG":
        if bank is None:
            raise ProtocolError("FedLoG needs a pretrained prompt-generator bank")
        if len(bank.generators) != K:
            raise ProtocolError(f"bank holds {len(bank.generators)} generators for {K} clients")
        generators = aggregate_generators(bank.generators, rates)

    states = []
    for k in range(K):
        g, pos = views.local(k)
        c = scenario.clients[k]
        mask = np.bincount(graph.labels[c.train], minlength=C) > 0 if alg == "Local" else None
        states.append(ClientState(k, _new_model(settings, graph, seed, k, mask), T.Adam(lr=settings.lr),
                                  np.zeros(C), g, pos[c.train], pos[c.valid]))
    n_shared = count_parameters(states[0].model.params, states[0].model.shared)
    per_client = round_bytes(alg, n_shared, settings.s, C, d)

    ledger = CommLedger()
    metrics: list = []
    global_shared, synthetic = None, None
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state_path = out / "state.bin"
        if resume and state_path.exists():
            last, global_shared, syn_feats = _restore(state_path.read_bytes(), states)
            if syn_feats is not None:
                synthetic = GlobalSyntheticData(syn_feats, np.repeat(np.arange(C), settings.s), settings.variant)
            _truncate_metrics(out / "metrics.csv", last)
            metrics = _read_metrics(out / "metrics.csv")
            for r in range(last + 1):
                for k in range(K):
                    ledger.record(r, k, per_client // 2, per_client // 2)
            start = last + 1
        elif (out / "metrics.csv").exists():
            (out / "metrics.csv").unlink()

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(start, settings.rounds):
            shared_in = global_shared if alg != "Local" and rnd >= 1 else None

            def job(st, rnd=rnd, shared_in=shared_in):
                return local_round(st, rnd, settings, seed, shared_in, synthetic, generators)

            states = list(pool.map(job, states)) if pool else [job(st) for st in states]
            rows = []
            for st in states:
                up = down = per_client // 2
                ledger.record(rnd, st.client_id, up, down)
                rows.append({"round": rnd, "client": st.client_id, "algorithm": alg, "setting": "SeenGraph",
                             "split": "valid", "accuracy": st.last_valid, "loss": st.last_loss,
                             "upload_bytes": up, "download_bytes": down})
            metrics.extend(rows)
            if alg != "Local":
                global_shared = aggregate_models([{n: st.model.params[n].data for n in st.model.shared}
                                                  for st in states])
            if alg == "FedLoG":
                synthetic = generate_global_synthetic([st.model.params["bank.head"].data for st in states],
                                                      [st.model.params["bank.tail"].data for st in states],
                                                      rates, settings.variant, settings.s, settings.eps,
                                                      warn=rnd == start)
            if out is not None:
                _write_metrics(out / "metrics.csv", rows)
                tmp = out / "state.bin.tmp"
                tmp.write_bytes(_state_blob(states, rnd, global_shared, synthetic))
                os.replace(tmp, out / "state.bin")
            if stop_after is not None and rnd >= stop_after:
                break
    finally:
        if pool:
            pool.shutdown()

    best = []
    for st in states:
        m = st.model.clone()
        if st.best_arrays is not None:
            for n, a in st.best_arrays.items():
                m.params[n].data = a.copy()
        best.append(m)
    global_model = None
    if global_shared is not None:
        global_model = states[0].model.clone()
        if isinstance(global_model, BaselineModel):
            global_model.class_mask = None
        _load_shared(global_model, global_shared)
    if out is not None:
        for k, m in enumerate(best):
            (out / f"best_client{k}.bin").write_bytes(model_to_bytes(m))
    return RunResult(settings, seed, best, [st.model for st in states], global_model, ledger, metrics,
                     [st.gamma.copy() for st in states], synthetic, [r for r in rates],
                     [(st.best_acc, st.best_round) for st in states])


def _read_metrics(path: Path) -> list:
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------- evaluation


def evaluate(models: list, graph: Graph, scenario: FederatedScenario, settings=SETTINGS) -> dict:
    """Per-client and mean accuracy for each requested setting.

    Settings whose test set is empty for a client are reported as ``None``
    for that client and left out of the mean.
    """
    views = ScenarioGraphs(graph, scenario)
    out = {}
    for setting in settings:
        if setting not in SETTINGS:
            raise ContractError(f"unknown evaluation setting {setting!r}")
        per = []
        for k, m in enumerate(models):
            c = scenario.clients[k]
            if setting == "SeenGraph":
                g, pos = views.local(k)
                per.append(accuracy(m, g, pos[c.test]))
            elif setting in ("UnseenNode", "MissingClass"):
                g, pos = views.expanded(k)
                nodes = c.unseen_test if setting == "UnseenNode" else c.missing_test
                per.append(accuracy(m, g, pos[nodes]))
            else:
                g, pos = views.new_client()
                per.append(accuracy(m, g, pos[scenario.new_client_test]))
        vals = [p for p in per if p is not None]
        out[setting] = {"per_client": per, "mean": float(np.mean(vals)) if vals else None}
    return out


def write_manifest(path, config: dict, seeds, version: str) -> None:
    doc = {"config": config, "seeds": list(seeds), "version": version}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def settings_dict(settings: RunSettings) -> dict:
    return asdict(settings)
