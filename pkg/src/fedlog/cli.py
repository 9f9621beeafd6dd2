"""Command line entry point: ``fedlog <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ConfigError, ContractError, FormatError, ProtocolError, ScenarioError
from .experiments import bank_for, mean_std, privacy_rows, reliability_rows, scenario_for, summarize
from .federation import SETTINGS, CommLedger, evaluate, run_protocol, write_manifest
from .model import model_from_bytes, unpack_arrays
from .partition import FederatedScenario, class_count_table
from .pca import pca_project
from .promptgen import PromptGeneratorBank

log = logging.getLogger("fedlog")

EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 2, 3, 4


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ------------------------------------------------------------------ config


OVERRIDES = [
    ("--dataset", "dataset", str), ("--clients", "n_clients", int), ("--rounds", "rounds", int),
    ("--epochs", "epochs", int), ("--s", "s", int), ("--lam", "lam", float), ("--beta", "beta", float),
    ("--tau", "tau", float), ("--h", "h", int), ("--n-inits", "n_inits", int), ("--pg-epochs", "pg_epochs", int),
    ("--variant", "variant", str), ("--noise", "noise", str), ("--noise-a", "noise_a", float),
    ("--algorithm", "algorithm", str), ("--lr", "lr", float), ("--batch-size", "batch_size", int),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    for flag, _, typ in OVERRIDES:
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--open-set", action="store_true", default=None)
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="repeatable")
    p.add_argument("--workers", type=int, default=None)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {dest: getattr(args, flag.lstrip("-").replace("-", "_")) for flag, dest, _ in OVERRIDES}
    changes.update(open_set=args.open_set, seeds=args.seeds, workers=args.workers)
    return cfg.replace(**changes)


def _scenario(args, graph, cfg, seed) -> FederatedScenario:
    if getattr(args, "scenario", None):
        sc = FederatedScenario.load(args.scenario)
        if sc.n_nodes != graph.n_nodes:
            raise FormatError(f"scenario covers {sc.n_nodes} nodes but the graph has {graph.n_nodes}")
        return sc
    return scenario_for(graph, cfg, seed)


def _write_csv(path, rows: list[dict], fieldnames=None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fieldnames})


def _dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- commands


def cmd_partition(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    sc = scenario_for(graph, cfg, cfg.seeds[0])
    sc.save(args.out)
    rows = class_count_table(graph, sc)
    cols = ["block", "class", "train", "valid", "test", "unseen_node", "missing_class"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join("-" if r[c] is None else str(r[c]) for c in cols))
    if args.table:
        _write_csv(args.table, rows, cols)
    return 0


def cmd_pretrain_pg(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    seed = cfg.seeds[0]
    sc = _scenario(args, graph, cfg, seed)
    bank = bank_for(graph, sc, cfg, seed)
    Path(args.out).write_bytes(bank.to_bytes())
    rows = [{"client": k, **e} for k, rep in enumerate(bank.reports) for e in rep["epochs"]]
    log_path = args.log or str(Path(args.out).with_suffix(".log.csv"))
    _write_csv(log_path, rows, ["client", "epoch", "feat", "grad", "total"])
    for k, rep in enumerate(bank.reports):
        print(f"client {k}: {rep['used']} nodes used, {rep['skipped']} skipped, "
              f"L_feat {rep['epochs'][0]['feat']:.4g} -> {rep['epochs'][-1]['feat']:.4g}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seeds, version_string())
    bank = PromptGeneratorBank.from_bytes(Path(args.bank).read_bytes()) if args.bank else None
    per_seed = {}
    for seed in cfg.seeds:
        sc = _scenario(args, graph, cfg, seed)
        seed_bank = bank
        if cfg.algorithm == "FedLoG" and seed_bank is None:
            seed_bank = bank_for(graph, sc, cfg, seed)
        res = run_protocol(graph, sc, cfg.settings(), seed, seed_bank, out / f"seed_{seed}", cfg.workers,
                           resume=args.resume)
        sc.save(out / f"seed_{seed}" / "scenario.json")
        ev = evaluate(res.best_models, graph, sc)
        _dump_json(out / f"seed_{seed}" / "eval.json", ev)
        per_seed[seed] = ev
    summary = summarize(per_seed)
    rows = [{"seed": s, "algorithm": cfg.algorithm, "setting": k, "accuracy": per_seed[s][k]["mean"]}
            for s in cfg.seeds for k in SETTINGS]
    for k, v in summary.items():
        rows.append({"seed": "mean", "algorithm": cfg.algorithm, "setting": k, "accuracy": v["mean"]})
        rows.append({"seed": "std", "algorithm": cfg.algorithm, "setting": k, "accuracy": v["std"]})
    _write_csv(out / "summary.csv", rows, ["seed", "algorithm", "setting", "accuracy"])
    for k, v in summary.items():
        print(f"{k}: {v['display']}")
    return 0


def _seed_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.glob("seed_*") if p.is_dir())
    return dirs or [root]


def cmd_eval(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    settings = args.settings.split(",") if args.settings else list(SETTINGS)
    for s in settings:
        if s not in SETTINGS:
            raise ConfigError(f"unknown setting {s!r}; choose from {SETTINGS}")
    per_seed = {}
    for i, d in enumerate(_seed_dirs(Path(args.checkpoints))):
        scen_path = args.scenario or d / "scenario.json"
        sc = FederatedScenario.load(scen_path)
        models = []
        for k in range(sc.n_clients):
            path = d / f"best_client{k}.bin"
            if not path.exists():
                raise FormatError(f"missing checkpoint for client {k}", path=path)
            models.append(model_from_bytes(path.read_bytes()))
        per_seed[i] = evaluate(models, graph, sc, settings)
    result = {"settings": summarize(per_seed), "runs": [str(d) for d in _seed_dirs(Path(args.checkpoints))]}
    if args.out:
        _dump_json(args.out, result)
    for k, v in result["settings"].items():
        print(f"{k}: {v['display']}")
    return 0


def cmd_reliability(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    rows = reliability_rows(graph, cfg)
    _write_csv(args.out, rows, ["mode", "imbalance_rate", "seed", "accuracy", "targets"])
    return 0


def cmd_privacy(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    rows = privacy_rows(graph, cfg)
    fields = ["mechanism", "a", "seed", *SETTINGS]
    keys = sorted({(r["mechanism"], r["a"]) for r in rows}, key=lambda t: ("none", "GN", "RP").index(t[0]))
    for mech, a in keys:
        group = [r for r in rows if (r["mechanism"], r["a"]) == (mech, a)]
        rows.append({"mechanism": mech, "a": a, "seed": "mean",
                     **{s: mean_std([r[s] for r in group])[0] for s in SETTINGS}})
    _write_csv(args.out, rows, fields)
    return 0


def _run_state(run_dir: Path):
    path = run_dir / "state.bin"
    if not path.exists():
        raise FormatError("run directory has no saved state", path=path)
    return unpack_arrays(path.read_bytes())


def cmd_pca(args) -> int:
    cfg = _config(args)
    graph = cfg.load_graph()
    arrays, _ = _run_state(Path(args.run_dir))
    if "synthetic/features" not in arrays:
        raise FormatError("run holds no global synthetic data (only FedLoG runs produce it)")
    syn = arrays["synthetic/features"]
    labels = np.repeat(np.arange(graph.n_classes), syn.shape[0] // graph.n_classes)
    c = args.cls
    orig = graph.features[graph.labels == c]
    po, ps = pca_project(orig, syn[labels == c], seed=cfg.seeds[0])
    rows = [{"source": "original", "pc1": a, "pc2": b} for a, b in po]
    rows += [{"source": "synthetic", "pc1": a, "pc2": b} for a, b in ps]
    _write_csv(args.out, rows, ["source", "pc1", "pc2"])
    return 0


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    report = {}
    for d in _seed_dirs(run):
        arrays, meta = _run_state(d)
        with open(d / "metrics.csv", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        rounds = sorted({int(r["round"]) for r in rows})
        per_round_bytes = [sum(int(r["upload_bytes"]) + int(r["download_bytes"]) for r in rows
                               if int(r["round"]) == t) for t in rounds]
        mean_valid = []
        for t in rounds:
            vals = [float(r["accuracy"]) for r in rows if int(r["round"]) == t and r["accuracy"] != ""]
            mean_valid.append(float(np.mean(vals)) if vals else None)
        gammas = [arrays[k].tolist() for k in sorted(arrays) if k.endswith("/gamma")]
        report[d.name] = {
            "rounds": len(rounds), "total_bytes": int(sum(per_round_bytes)),
            "total_mb": sum(per_round_bytes) / 1e6, "bytes_per_round": per_round_bytes[0] if rounds else 0,
            "rounds_to_target": CommLedger.rounds_to_target(mean_valid, args.target), "target": args.target,
            "gamma": gammas, "best": [(c["best_round"], c["best_acc"]) for c in meta["clients"]],
        }
    if args.out:
        _dump_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedlog", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build a scenario and print per-client class counts")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--table", help="also write the class-count table as CSV")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pretrain-pg", help="pretrain per-client prompt generators")
    _add_config_flags(p)
    p.add_argument("--scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch loss CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_pretrain_pg)

    p = sub.add_parser("train", help="run the federated protocol for every seed")
    _add_config_flags(p)
    p.add_argument("--scenario")
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved best checkpoints")
    _add_config_flags(p)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--scenario")
    p.add_argument("--settings", help="comma-separated subset of " + ",".join(SETTINGS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reliability", help="receiver target-class accuracy per contributor mode")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("privacy", help="FedLoG accuracy under class-rate noise")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_privacy)

    p = sub.add_parser("pca", help="2-D PCA of original vs global synthetic features of one class")
    _add_config_flags(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("report", help="communication and adaptive-factor summary of a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--target", type=float, default=0.8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (FormatError, ScenarioError, ContractError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
