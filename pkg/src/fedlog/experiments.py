"""Multi-seed drivers behind the CLI, including the reliability and privacy sweeps."""

from __future__ import annotations

import logging

import numpy as np

from .config import RunConfig
from .errors import ScenarioError
from .federation import SETTINGS, ScenarioGraphs, evaluate, pretrain_bank, run_protocol
from .graphio import Graph
from .model import accuracy
from .partition import FederatedScenario, ReliabilityConfig, build_reliability_scenario, build_scenario

log = logging.getLogger(__name__)


def scenario_for(graph: Graph, cfg: RunConfig, seed: int) -> FederatedScenario:
    return build_scenario(graph, cfg.n_clients, cfg.open_set, cfg.h, seed, tuple(cfg.split), cfg.min_missing_nodes)


def bank_for(graph: Graph, scenario: FederatedScenario, cfg: RunConfig, seed: int):
    return pretrain_bank(graph, scenario, cfg.h, cfg.n_inits, cfg.pg_epochs, seed, cfg.pg_lr, cfg.pg_batch,
                         cfg.workers)


def mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def fmt_mean_std(m, s) -> str:
    return "absent" if m is None else f"{m:.4f} ({s:.4f})"


def summarize(per_seed: dict[int, dict]) -> dict:
    """Mean and standard deviation over seeds of each setting's client-mean accuracy."""
    out = {}
    settings = [s for s in SETTINGS if any(s in r for r in per_seed.values())]
    for setting in settings:
        vals = [per_seed[k][setting]["mean"] for k in sorted(per_seed) if setting in per_seed[k]]
        m, s = mean_std(vals)
        out[setting] = {"per_seed": vals, "mean": m, "std": s, "display": fmt_mean_std(m, s)}
    return out


def receiver_accuracy(graph: Graph, scenario: FederatedScenario, model) -> float | None:
    receiver = scenario.extra["receiver"]
    g, pos = ScenarioGraphs(graph, scenario).local(receiver)
    return accuracy(model, g, pos[scenario.clients[receiver].test])


def reliability_rows(graph: Graph, cfg: RunConfig) -> list[dict]:
    """Receiver target-class accuracy of the FedAvg global model, one row per
    (mode, imbalance rate, seed), averaged over target classes."""
    targets = cfg.target_classes if cfg.target_classes is not None else list(range(graph.n_classes))
    settings = cfg.settings(algorithm="FedAvg")
    rows = []
    for mode in cfg.reliability_modes:
        rates = cfg.imbalance_rates if mode == "imbalance" else [None]
        for r in rates:
            for seed in cfg.seeds:
                accs = []
                for t in targets:
                    rc = ReliabilityConfig(cfg.receiver, mode, t, 0.0 if r is None else float(r), cfg.lam)
                    try:
                        sc = build_reliability_scenario(graph, cfg.n_clients, rc, seed, tuple(cfg.split))
                    except ScenarioError as exc:
                        log.warning("skipping target class %d in %s mode: %s", t, mode, exc)
                        continue
                    res = run_protocol(graph, sc, settings, seed, workers=cfg.workers)
                    accs.append(receiver_accuracy(graph, sc, res.global_model))
                m, _ = mean_std(accs)
                rows.append({"mode": mode, "imbalance_rate": "" if r is None else r, "seed": seed,
                             "accuracy": m, "targets": len(accs)})
    return rows


def privacy_rows(graph: Graph, cfg: RunConfig) -> list[dict]:
    """FedLoG accuracy per setting under no noise, Gaussian noise at each
    configured level and random permutation of the class rates."""
    mechanisms = [("none", 0.0)] + [("GN", float(a)) for a in cfg.noise_levels] + [("RP", 0.0)]
    rows = []
    for seed in cfg.seeds:
        sc = scenario_for(graph, cfg, seed)
        bank = bank_for(graph, sc, cfg, seed)
        for mech, a in mechanisms:
            res = run_protocol(graph, sc, cfg.settings(algorithm="FedLoG", noise=mech, noise_a=a), seed, bank,
                               workers=cfg.workers)
            ev = evaluate(res.best_models, graph, sc)
            rows.append({"mechanism": mech, "a": a, "seed": seed, **{k: v["mean"] for k, v in ev.items()}})
    return rows
