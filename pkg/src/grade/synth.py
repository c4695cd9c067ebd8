"""Dynamic stochastic block model with planted, drifting memberships."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .dyngraph import DynamicGraph, Snapshot


@dataclass
class SbmConfig:
    N: int = 200
    K: int = 4
    T: int = 5
    p_in: float = 0.3
    p_out: float = 0.01
    drift: float = 0.05
    degree_scale: float = 1.0  # multiplies both edge probabilities
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 or self.K < 1 or self.T < 1:
            raise ValueError("need N >= 2, K >= 1, T >= 1")
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if not 0 <= self.drift <= 1:
            raise ValueError("drift must lie in [0, 1]")
        if self.degree_scale <= 0 or self.p_in == 0:
            raise ValueError("configuration implies zero expected edges")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SbmConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS: dict[str, dict] = {
    "sbm-easy": dict(N=200, K=4, T=5, p_in=0.3, p_out=0.01, drift=0.05),
    "sbm-hard": dict(N=200, K=4, T=5, p_in=0.1, p_out=0.03, drift=0.2),
}


def preset(name: str, **overrides) -> SbmConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SbmConfig(**{**PRESETS[name], **overrides})


def generate_dynamic_sbm(config: SbmConfig) -> DynamicGraph:
    """Directed Bernoulli edges per ordered pair (no self-loops); labels at every (vertex, t)."""
    rng = np.random.default_rng(config.seed)
    N, K = config.N, config.K
    p_in = min(1.0, config.p_in * config.degree_scale)
    p_out = min(1.0, config.p_out * config.degree_scale)
    z = rng.integers(0, K, size=N)
    snaps, labels = [], {}
    off_diag = ~np.eye(N, dtype=bool)
    for t in range(1, config.T + 1):
        if t > 1:
            move = rng.random(N) < config.drift
            z = np.where(move, rng.integers(0, K, size=N), z)
        prob = np.where(z[:, None] == z[None, :], p_in, p_out)
        adj = (rng.random((N, N)) < prob) & off_diag
        src, dst = np.nonzero(adj)
        snaps.append(Snapshot(t, np.stack([src, dst], axis=1)))
        labels.update({(v, t): int(z[v]) for v in range(N)})
    return DynamicGraph(N, tuple(snaps), labels)


def brute_force_membership(graph: DynamicGraph, step: int) -> np.ndarray:
    """Majority ground-truth label among each node's neighbours (either direction).

    Ties go to the smallest label; isolated nodes keep their own label.
    Only meant to exercise metric code.
    """
    truth = graph.labels_at(step)
    if len(truth) < graph.N:
        raise ValueError(f"step {step}: labels missing for some vertices")
    lab = np.array([truth[v] for v in range(graph.N)])
    n_lab = lab.max() + 1
    votes = np.zeros((graph.N, n_lab))
    e = graph.snapshot(step).edges
    np.add.at(votes, (e[:, 0], lab[e[:, 1]]), 1)
    np.add.at(votes, (e[:, 1], lab[e[:, 0]]), 1)
    out = np.argmax(votes, axis=1)
    isolated = votes.sum(axis=1) == 0
    out[isolated] = lab[isolated]
    return out
