"""End-to-end evaluation of a trained model on the test steps of a split."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import metrics
from .dyngraph import DynamicGraph, TemporalSplit, filter_seen, seen_vertices
from .inference import (
    GradeModel,
    ProjectedStep,
    RecurrentState,
    hard_assign,
    membership_matrix,
    posterior_means,
    project_future,
)

ScorerFactory = Callable[[ProjectedStep], Callable[[np.ndarray], np.ndarray]]


def default_scorer(step: ProjectedStep):
    return metrics.mixture_scorer(step.pi, step.theta)


def project_split(model: GradeModel, state: RecurrentState, split: TemporalSplit) -> list[ProjectedStep]:
    """Projected states for the test steps (rolling through the validation steps first)."""
    n_val, n_test = len(split.val_steps), len(split.test_steps)
    steps = project_future(model, state, n_val + n_test)
    return steps[n_val:]


def evaluate(model: GradeModel, graph: DynamicGraph, split: TemporalSplit, state: RecurrentState,
             top_k: int = 250, scorer: ScorerFactory = default_scorer) -> dict:
    """MetricsReport as a plain dict: mar, nmi, modularity, topk_spearman, per_step[, warnings]."""
    if not len(split.test_steps):
        raise ValueError("split has no test steps")
    warnings: list[str] = []
    seen = seen_vertices(graph, split.train_steps)
    projected = project_split(model, state, split)
    snaps = [filter_seen(graph.snapshot(t), seen) for t in split.test_steps]
    if not any(len(s) for s in snaps):
        raise ValueError("no test edges between vertices seen in training")

    per_step = []
    rank_sum, rank_n = 0.0, 0
    nmis, spears = [], []
    seen_idx = np.array(sorted(seen), dtype=np.int64)
    for snap, step in zip(snaps, projected):
        entry: dict = {"t": snap.t, "n_edges": len(snap)}
        if len(snap):
            ranks = metrics.edge_ranks(snap.edges, scorer(step), 2048)
            rank_sum += float(ranks.sum())
            rank_n += len(ranks)
            entry["mar"] = float(ranks.mean())
        memb, _ = membership_matrix([(snap.edges, step)], model.gen, step.pi)
        z = hard_assign(memb)
        truth = {v: lab for v, lab in graph.labels_at(snap.t).items() if v in seen}
        if truth:
            nodes = sorted(truth)
            entry["nmi"] = metrics.nmi(z[nodes], [truth[v] for v in nodes])
            nmis.append(entry["nmi"])
        W = metrics.aggregate_adjacency([snap], graph.N)
        if W.nnz:
            entry["modularity"] = metrics.modularity(W[seen_idx][:, seen_idx], z[seen_idx])
            rho, skipped = metrics.mean_topk_spearman(step.theta, W, z, top_k)
            entry["topk_spearman"] = rho
            if skipped:
                warnings.append(f"step {snap.t}: Spearman undefined for communities {skipped}")
            if rho is not None:
                spears.append(rho)
        per_step.append(entry)

    memb_all, _ = membership_matrix([(s.edges, p) for s, p in zip(snaps, projected)], model.gen,
                                    projected[-1].pi)
    z_all = hard_assign(memb_all)
    W_all = metrics.aggregate_adjacency(snaps, graph.N)[seen_idx][:, seen_idx]

    report: dict = {"mar": rank_sum / rank_n}
    if nmis:
        report["nmi"] = float(np.mean(nmis))
    else:
        warnings.append("no ground-truth labels on test steps; nmi omitted")
    report["modularity"] = metrics.modularity(W_all, z_all[seen_idx])
    report["topk_spearman"] = float(np.mean(spears)) if spears else None
    report["per_step"] = per_step
    if warnings:
        report["warnings"] = warnings
    return report


def frozen_mar(model: GradeModel, graph: DynamicGraph, split: TemporalSplit) -> float:
    """Test MAR when the last train step's pi/theta are reused instead of projecting forward."""
    last = posterior_means(model, len(split.train_steps))[-1]
    seen = seen_vertices(graph, split.train_steps)
    snaps = [filter_seen(graph.snapshot(t), seen) for t in split.test_steps]
    return metrics.pooled_mar([(s.edges, last.pi, last.theta) for s in snaps])
