"""The generative process over a dynamic graph.

Node embeddings ``phi`` (N x L) and community embeddings ``beta`` (K x L)
follow Gaussian random walks. Per node, ``psi(phi_n)`` reshaped row-major to
K x K and row-softmaxed gives a transition matrix that carries the community
mixture ``pi_n`` forward; ``softmax(zeta(beta_k))`` is community k's
distribution over the N nodes. An edge (v, c) is drawn by z ~ pi_v, c ~ theta_z.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dyngraph import DynamicGraph, Snapshot
from .numerics import LOG_EPS, Linear, Parameter, Tensor, as_tensor, row_softmax, softmax
from .numerics import tape

SIMPLEX_TOL = 1e-5


@dataclass
class GenerativeParams:
    phi0: Parameter  # N x L
    beta0: Parameter  # K x L
    psi: Linear  # L -> K*K
    zeta: Linear  # L -> N
    gamma: float
    sigma: float

    def __post_init__(self):
        if self.gamma < 0 or self.sigma < 0:
            raise ValueError("gamma and sigma must be non-negative")
        N, L = self.phi0.shape
        K = self.beta0.shape[0]
        if self.beta0.shape[1] != L or self.psi.n_in != L or self.zeta.n_in != L:
            raise ValueError("embedding dimension mismatch between phi0, beta0, psi, zeta")
        if self.psi.n_out != K * K:
            raise ValueError(f"psi must map to K*K={K * K} outputs, got {self.psi.n_out}")
        if self.zeta.n_out != N:
            raise ValueError(f"zeta must map to N={N} outputs, got {self.zeta.n_out}")

    @classmethod
    def init(cls, N: int, K: int, L: int, gamma: float, sigma: float, rng: np.random.Generator,
             init_scale: float = 0.1) -> "GenerativeParams":
        if K < 1 or L < 1 or N < 1:
            raise ValueError("N, K, L must be >= 1")
        return cls(
            phi0=Parameter(rng.normal(0.0, init_scale, (N, L)), name="phi0"),
            beta0=Parameter(rng.normal(0.0, init_scale, (K, L)), name="beta0"),
            psi=Linear.init(L, K * K, rng, name="psi"),
            zeta=Linear.init(L, N, rng, name="zeta"),
            gamma=gamma,
            sigma=sigma,
        )

    @property
    def N(self) -> int:
        return self.phi0.shape[0]

    @property
    def K(self) -> int:
        return self.beta0.shape[0]

    @property
    def L(self) -> int:
        return self.phi0.shape[1]

    def named_parameters(self) -> dict[str, Parameter]:
        return {
            "phi0": self.phi0, "beta0": self.beta0,
            "psi.weight": self.psi.weight, "psi.bias": self.psi.bias,
            "zeta.weight": self.zeta.weight, "zeta.bias": self.zeta.bias,
        }


def evolve_embedding_prior(prev, smoothness: float, noise) -> np.ndarray:
    """One random-walk step with identity drift: prev + smoothness * noise."""
    if smoothness < 0:
        raise ValueError("smoothness must be non-negative")
    return np.asarray(prev, dtype=np.float64) + smoothness * np.asarray(noise, dtype=np.float64)


def transition_logits(phi, params: GenerativeParams) -> Tensor:
    out = params.psi(as_tensor(phi))
    K = params.K
    return tape.reshape(out, out.shape[:-1] + (K, K))


def transition_matrix(phi, params: GenerativeParams) -> Tensor:
    """row-softmax(psi(phi)); batched over any leading axes of ``phi``."""
    phi = as_tensor(phi)
    if not np.all(np.isfinite(phi.value)):
        raise ValueError("transition_matrix: non-finite embedding")
    return row_softmax(transition_logits(phi, params))


def _check_simplex(x: np.ndarray, what: str) -> None:
    if np.any(x < -SIMPLEX_TOL) or np.any(np.abs(x.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{what} is not on the probability simplex")


def update_mixture(pi_prev, A) -> Tensor:
    """Row vector times row-stochastic matrix; batched: (..., K) x (..., K, K)."""
    pi_prev, A = as_tensor(pi_prev), as_tensor(A)
    _check_simplex(pi_prev.value, "pi_prev")
    _check_simplex(A.value, "transition matrix rows")
    K = pi_prev.shape[-1]
    row = tape.reshape(pi_prev, pi_prev.shape[:-1] + (1, K))
    out = tape.matmul(row, A)
    return tape.reshape(out, pi_prev.shape)


def node_distribution(beta, params: GenerativeParams) -> Tensor:
    """softmax(zeta(beta)) over nodes; a (K, L) input gives the full K x N theta."""
    return softmax(params.zeta(as_tensor(beta)))


def log_node_distribution(beta, params: GenerativeParams) -> Tensor:
    return tape.log_softmax(params.zeta(as_tensor(beta)), axis=-1)


def edge_likelihood(v: int, c: int, pi: np.ndarray, theta: np.ndarray) -> float:
    pi = np.asarray(pi)
    theta = np.asarray(theta)
    N = theta.shape[1]
    if not (0 <= v < pi.shape[0] and 0 <= c < N):
        raise IndexError(f"vertex id out of range: v={v}, c={c}")
    return float(pi[v] @ theta[:, c])


def log_data_likelihood(graph: DynamicGraph, pi_per_step: Sequence[np.ndarray],
                        theta_per_step: Sequence[np.ndarray]) -> float:
    """Sum over steps and edges of log p(c | v); arguments clamped at 1e-12."""
    if len(pi_per_step) < graph.T or len(theta_per_step) < graph.T:
        raise ValueError(f"need pi/theta for all {graph.T} steps")
    total = 0.0
    for snap, pi, theta in zip(graph.snapshots, pi_per_step, theta_per_step):
        if not len(snap):
            continue
        p = np.einsum("ek,ke->e", np.asarray(pi)[snap.src], np.asarray(theta)[:, snap.dst])
        total += float(np.log(np.maximum(p, LOG_EPS)).sum())
    return total


@dataclass
class GenerativeState:
    """Latent state after some step t: embeddings and the community mixture."""

    t: int
    phi: np.ndarray  # N x L
    beta: np.ndarray  # K x L
    pi: np.ndarray  # N x K
    A: np.ndarray | None = None
    theta: np.ndarray | None = None

    @classmethod
    def initial(cls, params: GenerativeParams) -> "GenerativeState":
        K = params.K
        return cls(0, params.phi0.value.copy(), params.beta0.value.copy(), np.full((params.N, K), 1.0 / K))


@dataclass
class GeneratedSnapshot:
    snapshot: Snapshot
    z: np.ndarray  # community assignment per edge
    state: GenerativeState = field(repr=False)


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def generate_snapshot(params: GenerativeParams, prev_state: GenerativeState, edge_counts,
                      rng: np.random.Generator) -> GeneratedSnapshot:
    """Ancestral sampling of one snapshot given the previous latent state."""
    N, K, L = params.N, params.K, params.L
    counts = np.asarray(edge_counts, dtype=np.int64)
    if counts.shape != (N,) or np.any(counts < 0):
        raise ValueError("edge_counts must be N non-negative integers")
    beta = evolve_embedding_prior(prev_state.beta, params.gamma, rng.standard_normal((K, L)))
    phi = evolve_embedding_prior(prev_state.phi, params.sigma, rng.standard_normal((N, L)))
    A = transition_matrix(phi, params).value
    pi = np.einsum("nk,nkj->nj", prev_state.pi, A)
    theta = node_distribution(beta, params).value
    src = np.repeat(np.arange(N), counts)
    z = _sample_categorical(pi[src], rng) if len(src) else np.zeros(0, dtype=np.int64)
    dst = _sample_categorical(theta[z], rng) if len(src) else np.zeros(0, dtype=np.int64)
    t = prev_state.t + 1
    state = GenerativeState(t, phi, beta, pi, A, theta)
    return GeneratedSnapshot(Snapshot(t, np.stack([src, dst], axis=1)), z, state)
