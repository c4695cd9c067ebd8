import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grade.numerics import (
    Adam,
    GaussianParams,
    GRUCell,
    Linear,
    Parameter,
    Tensor,
    backward,
    check_gradients,
    gaussian_sample,
    gru_step,
    gumbel_softmax,
    kl_categorical,
    kl_gaussian_diag,
    linear,
    log_softmax,
    no_grad,
    row_softmax,
    softmax,
)
from grade.numerics import tape

finite = st.floats(-30, 30, allow_nan=False)


def _param(rng, *shape, scale=1.0, name="p"):
    return Parameter(rng.normal(0, scale, shape), name=name)


# ---------------------------------------------------------------- tape ops

UNARY = {
    "exp": tape.exp,
    "log": lambda a: tape.log(tape.exp(a) + 0.5),
    "tanh": tape.tanh,
    "sigmoid": tape.sigmoid,
    "neg": tape.neg,
    "clip": lambda a: tape.clip(a, -0.5, 0.5),
    "clamp_min": lambda a: tape.clamp_min(a, 0.1),
    "softmax": lambda a: tape.softmax(a, axis=-1) * np.arange(1.0, 5.0),
    "softmax_axis0": lambda a: tape.softmax(a, axis=0) * np.arange(1.0, 4.0)[:, None],
    "log_softmax": lambda a: tape.log_softmax(a) * np.arange(1.0, 5.0),
    "mean": lambda a: tape.mean(a, axis=0) * np.arange(1.0, 5.0),
    "transpose": lambda a: a.T @ np.arange(1.0, 4.0),
    "getitem": lambda a: a[np.array([0, 2, 0])] * 2.0,
    "take_rows": lambda a: tape.take_rows(a, np.array([2, 2, 1])),
    "reshape": lambda a: a.reshape(12) * np.arange(12.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(3)
    a = _param(rng, 3, 4)
    # keep clip/clamp away from their kinks where finite differences are undefined
    a.value[np.abs(np.abs(a.value) - 0.5) < 1e-3] += 0.01
    a.value[np.abs(a.value - 0.1) < 1e-3] += 0.01
    weights = rng.normal(size=UNARY[name](Tensor(a.value)).shape)
    err = check_gradients(lambda: (UNARY[name](a) * weights).sum(), [a])
    assert err < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "stack"])
def test_binary_gradients_with_broadcast(op):
    rng = np.random.default_rng(4)
    a = _param(rng, 2, 3, 4, name="a")
    if op == "matmul":
        b = _param(rng, 4, 5, name="b")
    elif op == "stack":
        b = _param(rng, 2, 3, 4, name="b")
    else:
        b = _param(rng, 3, 1, name="b")
    if op == "div":
        b.value = np.abs(b.value) + 1.0
    fn = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b,
        "matmul": lambda: a @ b, "stack": lambda: tape.stack([a, b * 3.0], axis=1),
    }[op]
    w = rng.normal(size=fn().shape)
    assert check_gradients(lambda: (fn() * w).sum(), [a, b]) < 1e-6


def test_matmul_vector_operands():
    rng = np.random.default_rng(5)
    M, v = _param(rng, 3, 4), _param(rng, 4)
    assert check_gradients(lambda: ((M @ v) * np.arange(3.0)).sum() + (v @ M.T).sum(), [M, v]) < 1e-6


def test_shared_subexpression_accumulates():
    x = Parameter(np.array(3.0))
    y = x * x + x
    backward(y)
    assert x.grad == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


# ------------------------------------------------------------------- linear

def test_linear_identity_and_constant():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(linear(np.eye(3), np.zeros(3), x).value, x)
    assert np.array_equal(linear(np.zeros((2, 3)), np.array([4.0, 5.0]), x).value, [4.0, 5.0])


def test_linear_gradient():
    rng = np.random.default_rng(0)
    lin = Linear.init(4, 3, rng)
    x = _param(rng, 4, name="x")
    err = check_gradients(lambda: (lin(x) * np.array([1.0, -2.0, 0.5])).sum(), lin.parameters() + [x])
    assert err < 1e-4


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear(np.zeros((2, 3)), np.zeros(2), np.zeros(4))


# ---------------------------------------------------------------------- GRU

def test_gru_closed_update_gate_keeps_state():
    rng = np.random.default_rng(1)
    cell = GRUCell.init(3, 4, rng)
    cell.b_u.value[:] = -50.0
    h = rng.normal(size=4)
    assert np.allclose(gru_step(cell, rng.normal(size=3), h).value, h, atol=1e-12)


def test_gru_zero_weights_halves_state():
    cell = GRUCell.init(3, 4, np.random.default_rng(0))
    for p in cell.parameters():
        p.value[:] = 0.0
    h = np.array([1.0, -2.0, 0.5, 4.0])
    assert np.allclose(gru_step(cell, np.ones(3), h).value, 0.5 * h)


def test_gru_matches_reference_recurrence():
    rng = np.random.default_rng(2)
    cell = GRUCell.init(3, 4, rng)
    x, h = rng.normal(size=3), rng.normal(size=4)
    P = {f: getattr(cell, f).value for f in ("W_r", "U_r", "b_r", "W_u", "U_u", "b_u", "W_h", "U_h", "b_h")}
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    r = sig(P["W_r"] @ x + P["U_r"] @ h + P["b_r"])
    u = sig(P["W_u"] @ x + P["U_u"] @ h + P["b_u"])
    hh = np.tanh(P["W_h"] @ x + P["U_h"] @ (r * h) + P["b_h"])
    assert np.allclose(gru_step(cell, x, h).value, (1 - u) * h + u * hh, atol=1e-14)


def test_gru_three_step_chain_gradient():
    rng = np.random.default_rng(6)
    cell = GRUCell.init(3, 4, rng)
    xs = [_param(rng, 3, name=f"x{i}") for i in range(3)]
    h0 = _param(rng, 4, name="h0")
    w = rng.normal(size=4)

    def f():
        h = h0
        for x in xs:
            h = gru_step(cell, x, h)
        return (h * w).sum()

    assert check_gradients(f, cell.parameters() + xs + [h0]) < 1e-4


def test_gru_batched_rows_match_single():
    rng = np.random.default_rng(7)
    cell = GRUCell.init(3, 4, rng)
    X, H = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    batch = gru_step(cell, X, H).value
    for i in range(5):
        assert np.allclose(batch[i], gru_step(cell, X[i], H[i]).value)


# ------------------------------------------------------------------ softmax

def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]).value, [0.5, 0.5])
    big = softmax([1000.0, 0.0]).value
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    assert np.allclose(softmax(np.log([1.0, 2.0, 3.0])).value, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax([0.0, np.nan])
    with pytest.raises(ValueError):
        row_softmax(np.array([[0.0, np.inf]]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-700, 700)))
def test_row_softmax_is_row_stochastic(M):
    P = row_softmax(M).value
    assert np.all(P >= 0)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(np.exp(log_softmax(M).value), P, atol=1e-12)


# ------------------------------------------------------------- sampling

def test_gaussian_sample_cases():
    g = GaussianParams(np.array([1.0, -2.0]), np.array([0.3, -1.0]))
    assert np.array_equal(gaussian_sample(g, np.zeros(2)).value, g.mean.value)
    g0 = GaussianParams(np.array([1.0, -2.0]), np.zeros(2))
    assert np.allclose(gaussian_sample(g0, np.array([0.5, 0.25])).value, [1.5, -1.75])


def test_gaussian_sample_monte_carlo_mean():
    rng = np.random.default_rng(0)
    mean, log_var = np.array([0.7, -1.3]), np.array([0.5, -0.4])
    n = 100_000
    noise = rng.standard_normal((n, 2))
    s = gaussian_sample(GaussianParams(np.broadcast_to(mean, (n, 2)), np.broadcast_to(log_var, (n, 2))), noise).value
    se = np.exp(0.5 * log_var) / math.sqrt(n)
    assert np.all(np.abs(s.mean(axis=0) - mean) < 4 * se)


def test_gaussian_sample_differentiable():
    rng = np.random.default_rng(8)
    m, lv = _param(rng, 5, name="m"), _param(rng, 5, name="lv")
    noise = rng.normal(size=5)
    w = rng.normal(size=5)
    assert check_gradients(lambda: (gaussian_sample(GaussianParams(m, lv), noise) * w).sum(), [m, lv]) < 1e-6


def test_gumbel_softmax_symmetry_and_limits():
    u = np.full(3, 0.3)
    assert np.allclose(gumbel_softmax(np.zeros(3), 0.5, u).value, 1 / 3)
    logits, noise = np.array([0.2, 1.0, -0.5]), np.array([0.9, 0.2, 0.6])
    g = -np.log(-np.log(noise))
    cold = gumbel_softmax(logits, 1e-4, noise).value
    assert np.allclose(cold, np.eye(3)[np.argmax(logits + g)], atol=1e-12)
    with pytest.raises(ValueError):
        gumbel_softmax(logits, 0.0, noise)
    edge = gumbel_softmax(logits, 0.5, np.array([0.0, 1.0, 0.5])).value
    assert np.all(np.isfinite(edge)) and edge.sum() == pytest.approx(1.0)


def test_gumbel_max_frequencies():
    rng = np.random.default_rng(1)
    logits = np.array([0.5, -0.3, 1.2, 0.0])
    n = 100_000
    s = gumbel_softmax(np.broadcast_to(logits, (n, 4)), 0.5, rng.random((n, 4))).value
    freq = np.bincount(s.argmax(axis=1), minlength=4) / n
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n))


def test_gumbel_softmax_gradient():
    rng = np.random.default_rng(9)
    logits = _param(rng, 2, 4)
    u, w = rng.random((2, 4)), rng.normal(size=(2, 4))
    assert check_gradients(lambda: (gumbel_softmax(logits, 0.5, u) * w).sum(), [logits]) < 1e-6


# ---------------------------------------------------------------------- KL

def test_kl_gaussian_cases():
    q = GaussianParams(np.array([0.3, -1.0]), np.array([0.2, 0.1]))
    assert kl_gaussian_diag(q, q).value == pytest.approx(0.0, abs=1e-15)
    one = kl_gaussian_diag(GaussianParams(np.zeros(1), np.zeros(1)), GaussianParams(np.ones(1), np.zeros(1)))
    assert one.value == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_gaussian_diag(q, GaussianParams(np.zeros(3), np.zeros(3)))


def test_kl_gaussian_monte_carlo():
    rng = np.random.default_rng(2)
    mq, lq = np.array([0.4, -0.6, 1.0]), np.array([-0.5, 0.3, 0.0])
    mp, lp = np.array([0.0, 0.5, -0.2]), np.array([0.2, -0.1, 0.4])
    closed = kl_gaussian_diag(GaussianParams(mq, lq), GaussianParams(mp, lp)).value
    x = mq + np.exp(0.5 * lq) * rng.standard_normal((1_000_000, 3))

    def logpdf(x, m, lv):
        return (-0.5 * (np.log(2 * np.pi) + lv + (x - m) ** 2 / np.exp(lv))).sum(axis=1)

    mc = np.mean(logpdf(x, mq, lq) - logpdf(x, mp, lp))
    assert abs(mc - closed) / closed < 0.01


def test_kl_categorical_cases():
    u = np.full(4, 0.25)
    assert kl_categorical(u, u).value == pytest.approx(0.0, abs=1e-15)
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]).value == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        kl_categorical([1.2, -0.2], [0.5, 0.5])


def test_kl_categorical_monte_carlo():
    rng = np.random.default_rng(3)
    q, p = np.array([0.5, 0.3, 0.15, 0.05]), np.array([0.1, 0.2, 0.3, 0.4])
    z = rng.choice(4, size=1_000_000, p=q)
    mc = np.mean(np.log(q[z]) - np.log(p[z]))
    closed = kl_categorical(q, p).value
    assert abs(mc - closed) / closed < 0.01


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_nonnegative_random(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 8))
    q, p = rng.dirichlet(np.full(K, 0.5), size=10), rng.dirichlet(np.full(K, 0.5), size=10)
    assert np.all(kl_categorical(q, p).value >= -1e-12)
    g1 = GaussianParams(rng.normal(size=(10, K)), rng.normal(size=(10, K)))
    g2 = GaussianParams(rng.normal(size=(10, K)), rng.normal(size=(10, K)))
    assert np.all(kl_gaussian_diag(g1, g2).value >= -1e-12)


def test_kl_gradients():
    rng = np.random.default_rng(10)
    mq, lq, mp, lp = (_param(rng, 3, name=n) for n in ("mq", "lq", "mp", "lp"))
    assert check_gradients(lambda: kl_gaussian_diag(GaussianParams(mq, lq), GaussianParams(mp, lp)),
                           [mq, lq, mp, lp]) < 1e-6
    a, b = _param(rng, 4, name="a"), _param(rng, 4, name="b")
    assert check_gradients(lambda: kl_categorical(softmax(a), softmax(b)), [a, b]) < 1e-6


# ---------------------------------------------------------- check_gradients

def test_check_gradients_quadratic():
    x = Parameter(np.array([0.7, -1.1]))
    assert check_gradients(lambda: (x * x * 3.0).sum(), [x]) < 1e-7


def test_check_gradients_detects_corruption():
    x = Parameter(np.array([0.7, -1.1]))

    def bad():
        y = x * x
        return tape._make(y.value.sum(), (y,), lambda g: (np.full(2, 1.7 * g),))

    assert check_gradients(bad, [x]) > 1e-2


def test_check_gradients_rejects_non_finite():
    x = Parameter(np.array([-1.0]))
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        check_gradients(lambda: tape.log(x).sum(), [x])


# --------------------------------------------------------------------- Adam

def test_adam_matches_hand_update():
    x = Parameter(np.array([1.0, -2.0]))
    opt = Adam([x], lr=0.1, decay=0.5, decay_every=2)
    m = v = np.zeros(2)
    ref = x.value.copy()
    for it in range(5):
        opt.zero_grad()
        backward((x * x).sum())
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        lr = 0.1 * 0.5 ** (it // 2)
        ref = ref - lr * (m / (1 - 0.9 ** (it + 1))) / (np.sqrt(v / (1 - 0.999 ** (it + 1))) + 1e-8)
        opt.step()
        assert np.allclose(x.value, ref, atol=1e-14)
    assert opt.current_lr == pytest.approx(0.1 * 0.25)
