"""Command-line entry point: ``grade <verb> [options]``.

Verbs: synth, ingest, stats, train, eval, project, top-nodes. Every verb
accepts ``--config`` (JSON or YAML, flat keys named like the long flags with
dashes turned into underscores), ``--seed`` and ``--out``. Values given on the
command line win over the config file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import synth as synth_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dyngraph import (
    EmptyGraphError,
    GraphFormatError,
    bucket_snapshots,
    graph_stats,
    load_edge_stream,
    load_labels,
    read_graph,
    read_vocab,
    split_temporal,
    tokens_from_vocab,
    write_edge_stream,
    write_graph,
    write_labels,
    write_vocab,
)
from .inference import TrainConfig, TrainingError, posterior_means, project_future, train, train_state
from .metrics import ranking
from .protocol import default_scorer, evaluate

log = logging.getLogger("grade")

GRAPH_FILE = "graph.tsv"
VOCAB_FILE = "vocab.tsv"

# Hyperparameters that work on the shipped synthetic presets.
TRAIN_PRESETS: dict[str, dict] = {
    "sbm-easy": dict(K=4, gamma=0.1, sigma=0.1, tau=0.5, epochs=300, split="3,1,1"),
    "sbm-hard": dict(K=4, gamma=0.1, sigma=0.1, tau=0.5, epochs=300, split="3,1,1"),
}

DEFAULTS: dict[str, dict] = {
    "synth": dict(preset="sbm-easy", seed=0, out="."),
    "ingest": dict(format="src,dst,t", window=1.0, undirected=False, delimiter=None, labels=None, out="."),
    "stats": dict(out=None),
    "train": dict(split="3,1,1", tau=0.5, L=128, H=0, epochs=100, batch_edges=50_000,
                  learning_rate=0.005, lr_decay=0.99, decay_every=100, seed=0, eval_every=1,
                  init_scale=1.0, out="."),
    "eval": dict(split=None, top_k=250, out="."),
    "project": dict(steps=None, out="."),
    "top-nodes": dict(k=10, step=None, out="."),
}


class CliError(Exception):
    pass


# ------------------------------------------------------------------ config

def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(verb: str, ns: argparse.Namespace) -> dict:
    """Merge built-in defaults < preset < config file < explicit flags."""
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("verb", "config", "func")}
    file_cfg = load_config_file(getattr(ns, "config", None))
    base = {k.replace("-", "_"): v for k, v in DEFAULTS[verb].items()}
    if verb == "train":
        name = flags.get("preset", file_cfg.get("preset"))
        if name is not None:
            if name not in TRAIN_PRESETS:
                raise CliError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
            base.update(TRAIN_PRESETS[name])
    return {**base, **file_cfg, **flags}


def parse_split(value) -> tuple[int, int, int]:
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = str(value).split(",")
    try:
        counts = tuple(int(x) for x in parts)
    except ValueError:
        raise CliError(f"split must be three integers like 3,1,1, got {value!r}") from None
    if len(counts) != 3:
        raise CliError(f"split must have three counts, got {value!r}")
    return counts


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _graph_dir(cfg: dict) -> Path:
    if not cfg.get("graph"):
        raise CliError("--graph (directory written by `grade ingest`) is required")
    return Path(cfg["graph"])


def _load_graph(cfg: dict):
    return read_graph(_graph_dir(cfg) / GRAPH_FILE)


def _tokens(cfg: dict, N: int) -> list[str]:
    vocab_path = _graph_dir(cfg) / VOCAB_FILE if cfg.get("graph") else None
    if vocab_path is not None and vocab_path.exists():
        return tokens_from_vocab(read_vocab(vocab_path))
    return [str(i) for i in range(N)]


# ----------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> dict:
    overrides = {k: cfg[k] for k in ("N", "K", "T", "p_in", "p_out", "drift", "degree_scale", "seed") if k in cfg}
    config = synth_mod.preset(cfg["preset"], **overrides)
    graph = synth_mod.generate_dynamic_sbm(config)
    out = _out_dir(cfg)
    write_edge_stream(graph, out / "edges.tsv")
    write_labels(graph, out / "labels.tsv")
    _write_json(config.to_dict(), out / "synth_config.json")
    log.info("synthesised %d edges over %d steps into %s", graph.n_links, graph.T, out)
    return {"edges": str(out / "edges.tsv"), "labels": str(out / "labels.tsv"), "links": graph.n_links}


def cmd_ingest(cfg: dict) -> dict:
    if not cfg.get("input"):
        raise CliError("--input edge stream is required")
    events, vocab = load_edge_stream(cfg["input"], cfg["format"], cfg.get("delimiter"))
    graph = bucket_snapshots(events, float(cfg["window"]), bool(cfg["undirected"]), N=len(vocab))
    if cfg.get("labels"):
        labels, skipped = load_labels(cfg["labels"], vocab)
        if skipped:
            log.warning("skipped %d label rows for vertices absent from the edge stream", skipped)
        graph = graph.with_labels(labels)
    out = _out_dir(cfg)
    write_graph(graph, out / GRAPH_FILE)
    write_vocab(vocab, out / VOCAB_FILE)
    stats = graph_stats(graph)
    _write_json(stats, out / "stats.json")
    return stats


def cmd_stats(cfg: dict) -> dict:
    stats = graph_stats(_load_graph(cfg))
    if cfg.get("out"):
        _write_json(stats, _out_dir(cfg) / "stats.json")
    return stats


def train_config_from(cfg: dict) -> TrainConfig:
    missing = [k for k in ("K", "gamma", "sigma") if k not in cfg]
    if missing:
        raise CliError(f"training needs {missing}; pass them as flags, in --config, or pick a --preset")
    return TrainConfig.from_dict(cfg)


def cmd_train(cfg: dict) -> dict:
    graph = _load_graph(cfg)
    counts = parse_split(cfg["split"])
    split = split_temporal(graph, counts)
    config = train_config_from(cfg)
    result = train(graph, split, config)
    out = _out_dir(cfg)
    n_train = len(split.train_steps)
    save_checkpoint(out / "checkpoint_best.ckpt", result.best, train_state(result.best, n_train), counts,
                    {"epoch": result.best_epoch, "T": graph.T})
    save_checkpoint(out / "checkpoint_final.ckpt", result.final, train_state(result.final, n_train), counts,
                    {"epoch": config.epochs, "T": graph.T})
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "step_t", "loss"])
        for rec in result.history:
            w.writerow([rec.iteration, rec.step_t, repr(rec.loss)])
    with open(out / "val_mar.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "val_mar"])
        for epoch, mar in result.val_history:
            w.writerow([epoch, repr(mar)])
    return {"best_epoch": result.best_epoch, "iterations": len(result.history)}


def cmd_eval(cfg: dict, scorer: Callable = default_scorer) -> dict:
    if not cfg.get("checkpoint"):
        raise CliError("--checkpoint is required")
    ckpt = load_checkpoint(cfg["checkpoint"])
    graph = _load_graph(cfg)
    counts = parse_split(cfg["split"]) if cfg.get("split") else ckpt.split
    split = split_temporal(graph, counts)
    if len(split.train_steps) != ckpt.state.t:
        raise CliError(f"split has {len(split.train_steps)} train steps but the checkpoint was "
                       f"trained on {ckpt.state.t}")
    report = evaluate(ckpt.model, graph, split, ckpt.state, int(cfg["top_k"]), scorer)
    _write_json(report, _out_dir(cfg) / "metrics.json")
    return report


def _states_through(ckpt, last_step: int):
    """Posterior means for train steps, projections beyond; indexed by step."""
    n_train = ckpt.state.t
    steps = posterior_means(ckpt.model, min(last_step, n_train))
    if last_step > n_train:
        steps += project_future(ckpt.model, ckpt.state, last_step - n_train)
    return steps


def cmd_project(cfg: dict) -> dict:
    if not cfg.get("checkpoint"):
        raise CliError("--checkpoint is required")
    ckpt = load_checkpoint(cfg["checkpoint"])
    n = int(cfg["steps"]) if cfg.get("steps") is not None else ckpt.split[1] + ckpt.split[2]
    if n < 1:
        raise CliError("--steps must be >= 1")
    steps = project_future(ckpt.model, ckpt.state, n)
    path = _out_dir(cfg) / "projection.npz"
    np.savez(path, t=np.array([s.t for s in steps]), pi=np.stack([s.pi for s in steps]),
             theta=np.stack([s.theta for s in steps]))
    return {"path": str(path), "steps": [s.t for s in steps]}


def cmd_top_nodes(cfg: dict) -> list[tuple[int, int, str, float]]:
    if not cfg.get("checkpoint"):
        raise CliError("--checkpoint is required")
    ckpt = load_checkpoint(cfg["checkpoint"])
    horizon = int(sum(ckpt.split))
    step = int(cfg["step"]) if cfg.get("step") is not None else ckpt.state.t
    if not 1 <= step <= horizon:
        raise CliError(f"step {step} outside the projectable range 1..{horizon}")
    k = int(cfg["k"])
    if k < 1:
        raise CliError("--k must be >= 1")
    theta = _states_through(ckpt, step)[step - 1].theta
    tokens = _tokens(cfg, theta.shape[1])
    rows = []
    for comm in range(theta.shape[0]):
        for rank, v in enumerate(ranking(theta[comm])[:k], start=1):
            rows.append((comm, rank, tokens[v], float(theta[comm, v])))
    with open(_out_dir(cfg) / "top_nodes.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["community", "rank", "vertex", "probability"])
        for comm, rank, tok, p in rows:
            w.writerow([comm, rank, tok, repr(p)])
    return rows


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grade", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON or YAML file with flat option keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        return p

    p = verb("synth", "generate a dynamic SBM edge stream and labels")
    p.add_argument("--preset", choices=sorted(synth_mod.PRESETS))
    p.add_argument("--N", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)
    p.add_argument("--drift", type=float)
    p.add_argument("--degree-scale", type=float)

    p = verb("ingest", "turn an edge stream into a snapshot graph")
    p.add_argument("--input", help="delimited edge stream")
    p.add_argument("--labels", help="optional vertex, step, label TSV")
    p.add_argument("--format", help='field order, default "src,dst,t"')
    p.add_argument("--window", type=float, help="snapshot width in timestamp units")
    p.add_argument("--delimiter")
    p.add_argument("--undirected", action="store_true", default=None)

    p = verb("stats", "print dataset descriptors of an ingested graph")
    p.add_argument("--graph", help="directory written by ingest")

    p = verb("train", "fit the model and write checkpoints and the loss curve")
    p.add_argument("--graph")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--split", help="train,val,test step counts, e.g. 3,1,1")
    p.add_argument("--K", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--L", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-edges", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--init-scale", type=float)

    p = verb("eval", "project over the test steps and write metrics.json")
    p.add_argument("--checkpoint")
    p.add_argument("--graph")
    p.add_argument("--split")
    p.add_argument("--top-k", type=int)

    p = verb("project", "roll a checkpoint forward and save pi/theta to projection.npz")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)

    p = verb("top-nodes", "most probable vertices per community at one step")
    p.add_argument("--checkpoint")
    p.add_argument("--graph", help="directory with vocab.tsv for vertex tokens")
    p.add_argument("--step", type=int)
    p.add_argument("--k", type=int)
    return parser


COMMANDS: dict[str, Callable[[dict], object]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "project": cmd_project,
    "top-nodes": cmd_top_nodes,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    verbose = ns.verbose
    del ns.verbose
    try:
        cfg = resolve(ns.verb, ns)
        result = COMMANDS[ns.verb](cfg)
    except (CliError, CheckpointError, GraphFormatError, EmptyGraphError, TrainingError,
            ValueError, KeyError, FileNotFoundError) as exc:
        if verbose:
            log.exception("command failed")
        print(f"grade {ns.verb}: error: {exc}", file=sys.stderr)
        return 2
    if ns.verb in ("stats", "eval"):
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
