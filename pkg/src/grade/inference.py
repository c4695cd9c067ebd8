"""Structured amortized variational inference and training.

The posterior over each node's (and community's) embedding at step t is a
diagonal Gaussian whose parameters come from a GRU run over that entity's
previous embeddings. The posterior over the community assignment of an edge
(v, c) reuses psi on the mean of both endpoint embeddings.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import metrics
from .dyngraph import DynamicGraph, Snapshot, TemporalSplit, filter_seen, seen_vertices
from .model import GenerativeParams, log_node_distribution, transition_matrix, update_mixture
from .numerics import (
    Adam,
    GaussianParams,
    GRUCell,
    Linear,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    gaussian_sample,
    gru_step,
    gumbel_softmax,
    kl_categorical,
    kl_gaussian_diag,
    no_grad,
    safe_log,
)
from .numerics import tape

log = logging.getLogger(__name__)

LOG_VAR_RANGE = (-10.0, 10.0)
DIST_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    K: int
    gamma: float
    sigma: float
    tau: float = 0.5
    L: int = 128
    H: int = 0  # 0 -> same as L
    epochs: int = 100
    batch_edges: int = 50_000
    learning_rate: float = 0.005
    lr_decay: float = 0.99
    decay_every: int = 100
    seed: int = 0
    eval_every: int = 1
    init_scale: float = 1.0  # std of phi0/beta0; 0.1 leaves training at the uniform saddle

    def __post_init__(self):
        if self.H == 0:
            self.H = self.L
        positive = ("K", "gamma", "sigma", "tau", "L", "H", "batch_edges", "learning_rate",
                    "lr_decay", "decay_every", "eval_every", "init_scale")
        bad = [name for name in positive if not getattr(self, name) > 0]
        if bad:
            raise ValueError(f"TrainConfig fields must be positive: {bad}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class VariationalParams:
    gru_node: GRUCell
    mu_node: Linear
    lv_node: Linear
    gru_comm: GRUCell
    mu_comm: Linear
    lv_comm: Linear

    @classmethod
    def init(cls, L: int, H: int, rng: np.random.Generator) -> "VariationalParams":
        return cls(
            gru_node=GRUCell.init(L, H, rng, "gru_node"),
            mu_node=Linear.init(H, L, rng, "mu_node"),
            lv_node=Linear.init(H, L, rng, "lv_node"),
            gru_comm=GRUCell.init(L, H, rng, "gru_comm"),
            mu_comm=Linear.init(H, L, rng, "mu_comm"),
            lv_comm=Linear.init(H, L, rng, "lv_comm"),
        )

    @property
    def H(self) -> int:
        return self.gru_node.n_hidden

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for part in ("gru_node", "mu_node", "lv_node", "gru_comm", "mu_comm", "lv_comm"):
            module = getattr(self, part)
            names = [f.name for f in fields(module)]
            for name, p in zip(names, module.parameters()):
                out[f"{part}.{name}"] = p
        return out


@dataclass
class GradeModel:
    gen: GenerativeParams
    var: VariationalParams
    config: TrainConfig

    def named_parameters(self) -> dict[str, Parameter]:
        return {**self.gen.named_parameters(), **self.var.named_parameters()}

    def copy(self) -> "GradeModel":
        return copy.deepcopy(self)

    @classmethod
    def init(cls, N: int, config: TrainConfig) -> "GradeModel":
        rng = np.random.default_rng(config.seed)
        gen = GenerativeParams.init(N, config.K, config.L, config.gamma, config.sigma, rng, config.init_scale)
        var = VariationalParams.init(config.L, config.H, rng)
        return cls(gen, var, config)


# ------------------------------------------------------------ posterior steps

def posterior_step(gru: GRUCell, mu_head: Linear, lv_head: Linear, h_prev, x_prev
                   ) -> tuple[GaussianParams, Tensor]:
    h_new = gru_step(gru, x_prev, h_prev)
    mean = mu_head(h_new)
    log_var = tape.clip(lv_head(h_new), *LOG_VAR_RANGE)
    return GaussianParams(mean, log_var), h_new


@dataclass
class RecurrentState:
    """Everything needed to continue the posterior recursion after step ``t``."""

    t: int
    h_node: np.ndarray
    h_comm: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    pi: np.ndarray


@dataclass
class StepRecord:
    t: int
    phi: Tensor  # sample, or posterior mean in noise-free mode
    beta: Tensor
    phi_post: GaussianParams
    beta_post: GaussianParams
    h_node: Tensor
    h_comm: Tensor
    pi_prev: Tensor
    pi: Tensor
    A: Tensor
    log_theta: Tensor  # K x N
    embedding_kl: Tensor  # sum_k KL_beta + mean_n KL_phi

    @property
    def theta(self) -> np.ndarray:
        return np.exp(self.log_theta.value)

    def state(self) -> RecurrentState:
        return RecurrentState(self.t, self.h_node.value.copy(), self.h_comm.value.copy(),
                              self.phi.value.copy(), self.beta.value.copy(), self.pi.value.copy())


@dataclass
class PosteriorTrajectory:
    steps: list[StepRecord] = field(default_factory=list)

    def at(self, t: int) -> StepRecord:
        for rec in self.steps:
            if rec.t == t:
                return rec
        raise KeyError(f"step {t} not in trajectory")

    @property
    def last(self) -> StepRecord:
        return self.steps[-1]

    def __len__(self) -> int:
        return len(self.steps)


def _prior(prev: Tensor, smoothness: float) -> GaussianParams:
    return GaussianParams(prev, np.full(prev.shape, 2.0 * np.log(smoothness)))


def advance(gen: GenerativeParams, var: VariationalParams, t: int, h_node, h_comm, x_node, x_comm,
            pi_prev, eps_phi: np.ndarray | None = None, eps_beta: np.ndarray | None = None,
            check: bool = True) -> StepRecord:
    """One step of the posterior recursion; ``eps_*`` None means use posterior means."""
    x_node, x_comm, pi_prev = as_tensor(x_node), as_tensor(x_comm), as_tensor(pi_prev)
    phi_post, h_node = posterior_step(var.gru_node, var.mu_node, var.lv_node, h_node, x_node)
    beta_post, h_comm = posterior_step(var.gru_comm, var.mu_comm, var.lv_comm, h_comm, x_comm)
    phi = phi_post.mean if eps_phi is None else gaussian_sample(phi_post, eps_phi)
    beta = beta_post.mean if eps_beta is None else gaussian_sample(beta_post, eps_beta)
    A = transition_matrix(phi, gen)
    pi = update_mixture(pi_prev, A)
    log_theta = log_node_distribution(beta, gen)
    kl_beta = kl_gaussian_diag(beta_post, _prior(x_comm, gen.gamma)).sum()
    kl_phi = kl_gaussian_diag(phi_post, _prior(x_node, gen.sigma)).sum() * (1.0 / gen.N)
    rec = StepRecord(t, phi, beta, phi_post, beta_post, h_node, h_comm, pi_prev, pi, A, log_theta,
                     kl_beta + kl_phi)
    if check:
        assert_distribution(A.value, "A")
        assert_distribution(pi.value, "pi")
        assert_distribution(rec.theta, "theta")
    return rec


def initial_state(model: GradeModel) -> tuple:
    gen, var = model.gen, model.var
    N, K, H = gen.N, gen.K, var.H
    return np.zeros((N, H)), np.zeros((K, H)), gen.phi0, gen.beta0, np.full((N, K), 1.0 / K)


def run_posterior(model: GradeModel, n_steps: int,
                  noise: list[tuple[np.ndarray, np.ndarray]] | None = None,
                  check: bool = True) -> PosteriorTrajectory:
    """Posterior recursion for steps 1..n_steps from the learnable initial embeddings."""
    h_node, h_comm, x_node, x_comm, pi = initial_state(model)
    traj = PosteriorTrajectory()
    for t in range(1, n_steps + 1):
        eps_phi, eps_beta = noise[t - 1] if noise is not None else (None, None)
        rec = advance(model.gen, model.var, t, h_node, h_comm, x_node, x_comm, pi, eps_phi, eps_beta, check)
        traj.steps.append(rec)
        h_node, h_comm, x_node, x_comm, pi = rec.h_node, rec.h_comm, rec.phi, rec.beta, rec.pi
    return traj


def assert_distribution(x: np.ndarray, what: str, tol: float = DIST_TOL) -> None:
    if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > tol):
        raise AssertionError(f"{what}: rows are not on the simplex (tol {tol})")


# ---------------------------------------------------------- community posterior

def amortized_z_posterior(pi_prev_row, phi_v, phi_c, gen: GenerativeParams) -> Tensor:
    """q(z | v, c) = pi_prev_v . row_softmax(psi((phi_v + phi_c) / 2))."""
    combined = (as_tensor(phi_v) + as_tensor(phi_c)) * 0.5
    return update_mixture(pi_prev_row, transition_matrix(combined, gen))


def elbo_batch(batch: np.ndarray, rec: StepRecord, gen: GenerativeParams, tau: float,
               gumbel_noise: np.ndarray, n_step_edges: int, check: bool = True) -> Tensor:
    """Negative ELBO contribution of a batch of step-t edges.

    The step's embedding KL is charged in proportion |batch| / |E^t| so that
    summing over all batches of a step charges it exactly once.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    if len(batch) == 0:
        raise ValueError("elbo_batch: empty batch")
    v, c = batch[:, 0], batch[:, 1]
    q = amortized_z_posterior(rec.pi_prev[v], rec.phi[v], rec.phi[c], gen)
    if check:
        assert_distribution(q.value, "q(z|v,c)")
    z = gumbel_softmax(safe_log(q), tau, gumbel_noise)
    log_theta_c = rec.log_theta.T[c]  # B x K
    recon = (z * log_theta_c).sum()
    kl_z = kl_categorical(q, rec.pi[v]).sum()
    return (kl_z - recon) + rec.embedding_kl * (len(batch) / n_step_edges)


def exact_edge_elbo(edge, rec: StepRecord, gen: GenerativeParams) -> float:
    """Per-edge ELBO with the expectation over z taken exactly instead of sampled."""
    v, c = int(edge[0]), int(edge[1])
    with no_grad():
        q = amortized_z_posterior(rec.pi_prev.value[v], rec.phi.value[v], rec.phi.value[c], gen).value
        kl = kl_categorical(q, rec.pi.value[v]).value
    return float(q @ rec.log_theta.value[:, c] - kl)


# ------------------------------------------------------------------- training

@dataclass
class LossRecord:
    iteration: int
    step_t: int
    loss: float


@dataclass
class TrainResult:
    best: GradeModel
    final: GradeModel
    history: list[LossRecord]
    val_history: list[tuple[int, float]]
    best_epoch: int
    split: TemporalSplit


def _epoch_noise(config: TrainConfig, epoch: int, N: int, K: int, n_train: int,
                 step_sizes: list[int]) -> tuple[list, list, list]:
    rng = np.random.default_rng([config.seed, epoch])
    emb = [(rng.standard_normal((N, config.L)), rng.standard_normal((K, config.L))) for _ in range(n_train)]
    perms = [rng.permutation(E) for E in step_sizes]
    gumbel = [rng.random((E, K)) for E in step_sizes]
    return emb, perms, gumbel


def train(graph: DynamicGraph, split: TemporalSplit, config: TrainConfig,
          callback: Callable[[int, GradeModel], None] | None = None, check: bool = True) -> TrainResult:
    """Stochastic ELBO maximisation over the train steps; keeps the lowest-validation-MAR model."""
    train_steps = list(split.train_steps)
    if not train_steps or train_steps[0] != 1:
        raise TrainingError("train steps must be non-empty and start at step 1")
    step_edges = [graph.snapshot(t).edges for t in train_steps]
    if sum(len(e) for e in step_edges) == 0:
        raise TrainingError("no training edges")
    model = GradeModel.init(graph.N, config)
    N, K = graph.N, config.K
    params = list(model.named_parameters().values())
    opt = Adam(params, lr=config.learning_rate, decay=config.lr_decay, decay_every=config.decay_every)

    seen = seen_vertices(graph, train_steps)
    val_snaps = [filter_seen(graph.snapshot(t), seen) for t in split.val_steps]
    has_val = any(len(s) for s in val_snaps)

    history: list[LossRecord] = []
    val_history: list[tuple[int, float]] = []
    best, best_mar, best_epoch = model.copy(), np.inf, 0
    n_train = len(train_steps)
    for epoch in range(1, config.epochs + 1):
        emb, perms, gumbel = _epoch_noise(config, epoch, N, K, n_train, [len(e) for e in step_edges])
        for t in train_steps:
            edges = step_edges[t - 1]
            E = len(edges)
            for start in range(0, E, config.batch_edges):
                idx = perms[t - 1][start:start + config.batch_edges]
                opt.zero_grad()
                traj = run_posterior(model, t, emb[:t], check=check)
                loss = elbo_batch(edges[idx], traj.last, model.gen, config.tau, gumbel[t - 1][idx], E, check)
                backward(loss)
                history.append(LossRecord(opt.iteration, t, float(loss.value)))
                opt.step()
        if has_val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            mar = validation_mar(model, n_train, val_snaps, check)
            val_history.append((epoch, mar))
            if mar < best_mar:
                best, best_mar, best_epoch = model.copy(), mar, epoch
        if callback is not None:
            callback(epoch, model)
    if not has_val and config.epochs > 0:
        best, best_epoch = model.copy(), config.epochs
    log.info("training done: %d iterations, best epoch %d (val MAR %.3f)", opt.iteration, best_epoch, best_mar)
    return TrainResult(best, model, history, val_history, best_epoch, split)


def validation_mar(model: GradeModel, n_train: int, val_snaps: list[Snapshot], check: bool = True) -> float:
    state = train_state(model, n_train)
    projected = project_future(model, state, len(val_snaps))
    if check:
        for p in projected:
            assert_distribution(p.pi @ p.theta, "neighbour distribution")
    return metrics.pooled_mar([(s.edges, p.pi, p.theta) for s, p in zip(val_snaps, projected)])


# ----------------------------------------------------------------- projection

@dataclass
class ProjectedStep:
    t: int
    phi: np.ndarray
    beta: np.ndarray
    pi_prev: np.ndarray
    pi: np.ndarray
    theta: np.ndarray
    h_node: np.ndarray
    h_comm: np.ndarray

    @classmethod
    def from_record(cls, rec: StepRecord) -> "ProjectedStep":
        return cls(rec.t, rec.phi.value, rec.beta.value, rec.pi_prev.value, rec.pi.value, rec.theta,
                   rec.h_node.value, rec.h_comm.value)


def posterior_means(model: GradeModel, n_steps: int) -> list[ProjectedStep]:
    """Noise-free posterior trajectory for steps 1..n_steps."""
    with no_grad():
        traj = run_posterior(model, n_steps, noise=None)
    return [ProjectedStep.from_record(r) for r in traj.steps]


def train_state(model: GradeModel, n_train: int) -> RecurrentState:
    with no_grad():
        return run_posterior(model, n_train, noise=None).last.state()


def project_future(model: GradeModel, state: RecurrentState, n_steps: int) -> list[ProjectedStep]:
    """Roll the posterior GRUs forward from ``state`` feeding means; steps state.t+1 .. state.t+n_steps."""
    out: list[ProjectedStep] = []
    h_node, h_comm, x_node, x_comm, pi = state.h_node, state.h_comm, state.phi, state.beta, state.pi
    with no_grad():
        for t in range(state.t + 1, state.t + n_steps + 1):
            rec = advance(model.gen, model.var, t, h_node, h_comm, x_node, x_comm, pi)
            out.append(ProjectedStep.from_record(rec))
            h_node, h_comm, x_node, x_comm, pi = (rec.h_node.value, rec.h_comm.value, rec.phi.value,
                                                 rec.beta.value, rec.pi.value)
    return out


def state_after(step: ProjectedStep) -> RecurrentState:
    return RecurrentState(step.t, step.h_node, step.h_comm, step.phi, step.beta, step.pi)


# ----------------------------------------------------------------- membership

class IsolatedNodeError(ValueError):
    """The node has no neighbours in the snapshot; fall back to its prior pi_v."""


def edge_posteriors(edges: np.ndarray, step: ProjectedStep, gen: GenerativeParams) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    v, c = edges[:, 0], edges[:, 1]
    with no_grad():
        return amortized_z_posterior(step.pi_prev[v], step.phi[v], step.phi[c], gen).value


def community_membership(v: int, snapshot: Snapshot, step: ProjectedStep, gen: GenerativeParams) -> np.ndarray:
    """Average of q(z | v, c) over v's (multiset) out-neighbours c in the snapshot."""
    mask = snapshot.src == v
    if not mask.any():
        raise IsolatedNodeError(f"vertex {v} has no neighbours at step {snapshot.t}; fall back to prior pi_v")
    return edge_posteriors(snapshot.edges[mask], step, gen).mean(axis=0)


def membership_matrix(edge_sets: list[tuple[np.ndarray, ProjectedStep]], gen: GenerativeParams,
                      fallback_pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour-averaged memberships for all N nodes over one or more (edges, state) pairs.

    Nodes without any neighbour take ``fallback_pi``. Returns (memberships, has_neighbours).
    """
    N, K = fallback_pi.shape
    acc = np.zeros((N, K))
    cnt = np.zeros(N)
    for edges, step in edge_sets:
        if not len(edges):
            continue
        q = edge_posteriors(edges, step, gen)
        np.add.at(acc, edges[:, 0], q)
        np.add.at(cnt, edges[:, 0], 1)
    has = cnt > 0
    out = fallback_pi.copy()
    out[has] = acc[has] / cnt[has, None]
    return out, has


def hard_assign(memberships: np.ndarray) -> np.ndarray:
    return np.argmax(memberships, axis=-1)
