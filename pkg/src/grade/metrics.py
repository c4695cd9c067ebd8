"""Evaluation metrics: mean average rank, NMI, modularity, top-k Spearman."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.stats import rankdata

from .dyngraph import Snapshot


class UndefinedCorrelationError(ValueError):
    """Spearman correlation of a constant vector is undefined."""


def neighbor_distribution(v: int, pi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """p(. | v) = sum_k pi[v, k] theta[k, .]."""
    if not 0 <= v < pi.shape[0]:
        raise IndexError(f"vertex {v} out of range")
    return pi[v] @ theta


def rank_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of ``targets[i]`` in row i of ``scores``, descending, ties by ascending id."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    s = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s) | ((scores == s) & (ids < targets[:, None]))
    return ahead.sum(axis=1) + 1


def ranking(scores: np.ndarray) -> np.ndarray:
    """Candidate order for one source: descending score, ties by ascending vertex id."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def mean_average_rank(edges: np.ndarray, score_fn: Callable[[np.ndarray], np.ndarray],
                      chunk: int = 2048) -> float:
    """Mean 1-based rank of each edge's true target among all N candidates.

    ``score_fn(sources)`` returns a (len(sources), N) score matrix.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if not len(edges):
        raise ValueError("mean_average_rank: no test edges")
    return float(edge_ranks(edges, score_fn, chunk).mean())


def edge_ranks(edges: np.ndarray, score_fn, chunk: int = 2048) -> np.ndarray:
    sources, inverse = np.unique(edges[:, 0], return_inverse=True)
    ranks = np.empty(len(edges), dtype=np.int64)
    for start in range(0, len(sources), chunk):
        block = sources[start:start + chunk]
        scores = score_fn(block)
        sel = np.nonzero((inverse >= start) & (inverse < start + len(block)))[0]
        ranks[sel] = rank_of_targets(scores[inverse[sel] - start], edges[sel, 1])
    return ranks


def mixture_scorer(pi: np.ndarray, theta: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda sources: pi[sources] @ theta


def pooled_mar(parts: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> float:
    """MAR over the union of several (edges, pi, theta) steps, each edge weighted once."""
    total, n = 0.0, 0
    for edges, pi, theta in parts:
        if len(edges):
            r = edge_ranks(np.asarray(edges).reshape(-1, 2), mixture_scorer(pi, theta), 2048)
            total += float(r.sum())
            n += len(r)
    if n == 0:
        raise ValueError("pooled_mar: no edges")
    return total / n


# ------------------------------------------------------------------------- NMI

def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """I(P; G) / sqrt(H(P) H(G)); single-cluster partitions score 1 if both are, else 0."""
    p = np.asarray(predicted)
    g = np.asarray(truth)
    if p.shape != g.shape or p.size == 0:
        raise ValueError("nmi: need equally sized, non-empty labelings")
    _, pi = np.unique(p, return_inverse=True)
    _, gi = np.unique(g, return_inverse=True)
    table = sparse.coo_matrix((np.ones(p.size), (pi, gi))).toarray()
    hp = _entropy(table.sum(axis=1))
    hg = _entropy(table.sum(axis=0))
    if hp == 0.0 or hg == 0.0:
        return 1.0 if (hp == 0.0 and hg == 0.0) else 0.0
    joint = table / p.size
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(hp * hg), 0.0, 1.0))


# ------------------------------------------------------------------ modularity

def aggregate_adjacency(snapshots: Iterable[Snapshot], N: int) -> sparse.csr_matrix:
    """Symmetric weighted adjacency: W = C + C^T, C[i, j] = count of (i, j) observations."""
    rows, cols = [], []
    for snap in snapshots:
        if len(snap):
            rows.append(snap.src)
            cols.append(snap.dst)
    if not rows:
        return sparse.csr_matrix((N, N))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    C = sparse.coo_matrix((np.ones(len(r)), (r, c)), shape=(N, N)).tocsr()
    return (C + C.T).tocsr()


def modularity(adjacency, assignments: Sequence[int]) -> float:
    """Newman modularity of a hard partition on a symmetric weighted adjacency."""
    W = sparse.csr_matrix(adjacency)
    z = np.asarray(assignments)
    two_m = W.sum()
    if two_m <= 0:
        raise ValueError("modularity: graph has no edges")
    deg = np.asarray(W.sum(axis=1)).ravel()
    coo = W.tocoo()
    inside = coo.data[z[coo.row] == z[coo.col]].sum()
    _, zi = np.unique(z, return_inverse=True)
    comm_deg = np.bincount(zi, weights=deg)
    return float(inside / two_m - (comm_deg ** 2).sum() / two_m ** 2)


# -------------------------------------------------------------------- Spearman

def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman: need two equally sized vectors of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        raise UndefinedCorrelationError("spearman: a vector is constant")
    return float((rx * ry).sum() / denom)


def top_nodes(theta_row: np.ndarray, top_k: int) -> np.ndarray:
    return ranking(theta_row)[:top_k]


def topk_spearman(k: int, theta: np.ndarray, adjacency, assignments: np.ndarray, top_k: int = 250) -> float:
    """Spearman between theta[k] and within-community degree over the top_k nodes of community k."""
    W = sparse.csr_matrix(adjacency)
    nodes = top_nodes(theta[k], top_k)
    in_k = (np.asarray(assignments) == k).astype(np.float64)
    centrality = W[nodes] @ in_k
    return spearman(theta[k, nodes], centrality)


def mean_topk_spearman(theta: np.ndarray, adjacency, assignments: np.ndarray, top_k: int = 250
                       ) -> tuple[float | None, list[int]]:
    """Average over communities with a defined correlation; also returns the skipped ones."""
    values, skipped = [], []
    for k in range(theta.shape[0]):
        try:
            values.append(topk_spearman(k, theta, adjacency, assignments, top_k))
        except UndefinedCorrelationError:
            skipped.append(k)
    return (float(np.mean(values)) if values else None), skipped
