"""Differentiable building blocks used by the generative model and its posterior."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tape
from .tape import Parameter, Tensor, as_tensor

LOG_EPS = 1e-12
GUMBEL_EPS = 1e-10


def _check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.value)):
        raise ValueError(f"{what}: non-finite input")


@dataclass
class GaussianParams:
    """Diagonal Gaussian stored as (mean, log-variance); batched over leading axes."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class Linear:
    weight: Parameter  # (out, in)
    bias: Parameter  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear") -> "Linear":
        bound = 1.0 / np.sqrt(n_in)
        return cls(Parameter(rng.uniform(-bound, bound, size=(n_out, n_in)), name=f"{name}.weight"),
                   Parameter(rng.uniform(-bound, bound, size=n_out), name=f"{name}.bias"))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return linear(self.weight, self.bias, x)


def linear(W, b, x) -> Tensor:
    """y = W x + b, applied along the last axis of ``x``."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ValueError(f"linear: weight {W.shape} / bias {b.shape} inconsistent")
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    if x.ndim == 1:
        return tape.matmul(W, x) + b
    return tape.matmul(x, W.T) + b


@dataclass
class GRUCell:
    """Single-layer GRU; gates r (reset), u (update), h (candidate)."""

    W_r: Parameter
    U_r: Parameter
    b_r: Parameter
    W_u: Parameter
    U_u: Parameter
    b_u: Parameter
    W_h: Parameter
    U_h: Parameter
    b_h: Parameter

    @classmethod
    def init(cls, n_in: int, n_hidden: int, rng: np.random.Generator, name: str = "gru") -> "GRUCell":
        bound = 1.0 / np.sqrt(n_hidden)
        kw = {}
        for gate in "ruh":
            kw[f"W_{gate}"] = Parameter(rng.uniform(-bound, bound, (n_hidden, n_in)), name=f"{name}.W_{gate}")
            kw[f"U_{gate}"] = Parameter(rng.uniform(-bound, bound, (n_hidden, n_hidden)), name=f"{name}.U_{gate}")
            kw[f"b_{gate}"] = Parameter(rng.uniform(-bound, bound, n_hidden), name=f"{name}.b_{gate}")
        return cls(**kw)

    @property
    def n_in(self) -> int:
        return self.W_r.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W_r.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_r, self.U_r, self.b_r, self.W_u, self.U_u, self.b_u, self.W_h, self.U_h, self.b_h]


def gru_step(params: GRUCell, x, h) -> Tensor:
    x, h = as_tensor(x), as_tensor(h)
    if x.shape[-1] != params.n_in or h.shape[-1] != params.n_hidden:
        raise ValueError(f"gru_step: x {x.shape} / h {h.shape} do not match cell "
                         f"({params.n_in} -> {params.n_hidden})")
    if x.shape[:-1] != h.shape[:-1]:
        raise ValueError("gru_step: batch shapes of x and h differ")
    r = tape.sigmoid(linear(params.W_r, params.b_r, x) + _mv(params.U_r, h))
    u = tape.sigmoid(linear(params.W_u, params.b_u, x) + _mv(params.U_u, h))
    cand = tape.tanh(linear(params.W_h, params.b_h, x) + _mv(params.U_h, r * h))
    return (1.0 - u) * h + u * cand


def _mv(M: Tensor, v: Tensor) -> Tensor:
    return tape.matmul(M, v) if v.ndim == 1 else tape.matmul(v, M.T)


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    _check_finite(logits, "softmax")
    return tape.softmax(logits, axis=-1)


def row_softmax(M) -> Tensor:
    M = as_tensor(M)
    if M.ndim < 2:
        raise ValueError("row_softmax expects a matrix")
    return softmax(M)


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    _check_finite(logits, "log_softmax")
    return tape.log_softmax(logits, axis=-1)


def safe_log(x) -> Tensor:
    return tape.log(tape.clamp_min(as_tensor(x), LOG_EPS))


def gaussian_sample(g: GaussianParams, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ValueError(f"gaussian_sample: noise {noise.shape} vs mean {g.mean.shape}")
    return g.mean + tape.exp(0.5 * g.log_var) * noise


def gumbel_softmax(logits, tau: float, noise) -> Tensor:
    """Soft relaxed categorical sample; ``noise`` is Uniform(0, 1) of the logits' shape."""
    if not tau > 0:
        raise ValueError(f"gumbel_softmax: tau must be > 0, got {tau}")
    logits = as_tensor(logits)
    u = np.clip(np.asarray(noise, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    if u.shape != logits.shape:
        raise ValueError(f"gumbel_softmax: noise {u.shape} vs logits {logits.shape}")
    g = -np.log(-np.log(u))
    return softmax((logits + g) * (1.0 / tau))


def kl_gaussian_diag(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) summed over the last axis (one value per leading index)."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"kl_gaussian_diag: dims {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    diff = q.mean - p.mean
    inv_p = tape.exp(-p.log_var)
    terms = p.log_var - q.log_var + (tape.exp(q.log_var) + diff * diff) * inv_p - 1.0
    return 0.5 * terms.sum(axis=-1)


def kl_categorical(q, p) -> Tensor:
    """sum_k q_k (log q_k - log p_k) along the last axis, 0 log 0 := 0."""
    q, p = as_tensor(q), as_tensor(p)
    if q.shape[-1] != p.shape[-1]:
        raise ValueError("kl_categorical: support sizes differ")
    if np.any(q.value < 0) or np.any(p.value < 0):
        raise ValueError("kl_categorical: negative probability")
    return (q * (safe_log(q) - safe_log(p))).sum(axis=-1)


def check_gradients(f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-5,
                    max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    ``f`` must rebuild the graph from the current parameter values on each call.
    ``max_elements`` subsamples coordinates per parameter for large tensors.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.value)):
        raise ValueError("check_gradients: f is not finite")
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().value
            flat[i] = orig - step
            fm = f().value
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("check_gradients: f is not finite near the point")
            numeric = float((fp - fm) / (2 * step))
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
