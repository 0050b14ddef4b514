"""Central finite-difference verification for every differentiable op.

Each registered op provides a case generator: given an rng it returns a
scalar-valued builder plus the input tensors to perturb. Inputs are drawn
away from non-differentiable points (relu/clamp kinks, the log clamp) so
the central difference is a valid oracle. The analytic gradient from
backward() must match to the requested relative tolerance.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5

# op name -> fn(rng) -> (builder, inputs); builder(*inputs) returns a scalar Tensor.
CASES: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        CASES[name] = fn
        return fn

    return deco


def registered_ops() -> list[str]:
    return sorted(CASES)


def numeric_gradient(builder, inputs: list[Tensor], which: int, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of builder(*inputs) w.r.t. inputs[which]."""
    x = inputs[which]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with T.no_grad():
            hi = builder(*inputs).item()
        flat[i] = orig - step
        with T.no_grad():
            lo = builder(*inputs).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_case(builder, inputs: list[Tensor], step: float = FD_STEP) -> float:
    """Worst relative error between analytic and numeric gradients.

    Error is ||analytic - numeric||_inf normalized by the larger of the
    numeric gradient's magnitude and 1e-4 (so near-zero gradients are
    compared absolutely at fine scale).
    """
    for x in inputs:
        x.requires_grad = True
        x.zero_grad()
    out = builder(*inputs)
    out.backward()
    analytic = [x.grad.copy() for x in inputs]
    worst = 0.0
    for i, x in enumerate(inputs):
        numeric = numeric_gradient(builder, inputs, i, step)
        scale = max(float(np.abs(numeric).max()), 1e-4)
        err = float(np.abs(analytic[i] - numeric).max()) / scale
        worst = max(worst, err)
    return worst


def run_op(name: str, cases: int, rng: np.random.Generator, step: float = FD_STEP) -> float:
    """Worst error of `cases` randomized checks for one registered op."""
    gen = CASES[name]
    worst = 0.0
    for _ in range(cases):
        builder, inputs = gen(rng)
        worst = max(worst, check_case(builder, inputs, step))
    return worst


def run_all(cases: int, rng: np.random.Generator, step: float = FD_STEP) -> dict[str, float]:
    """Worst relative error per registered op; ops sorted by name."""
    return {name: run_op(name, cases, rng, step) for name in registered_ops()}


# -- input generators ---------------------------------------------------------


def _away_from_zero(rng, shape, margin=0.15, span=1.0):
    x = rng.uniform(margin, margin + span, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape, lo=0.4, hi=2.5):
    return rng.uniform(lo, hi, size=shape)


def _proj(rng, shape) -> np.ndarray:
    """Fixed random projection making a scalar out of an op output."""
    return rng.normal(size=shape)


def _scalarize(op, r):
    def builder(*inputs):
        return T.tsum(op(*inputs) * r)

    return builder


@register("add")
def _case_add(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    a = Tensor(rng.normal(size=shape))
    # Exercise broadcasting on roughly every other case.
    b_shape = shape if rng.random() < 0.5 else (1, shape[1])
    b = Tensor(rng.normal(size=b_shape))
    r = _proj(rng, shape)
    return _scalarize(T.add, r), [a, b]


@register("sub")
def _case_sub(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    a = Tensor(rng.normal(size=shape))
    b_shape = shape if rng.random() < 0.5 else (shape[0], 1)
    b = Tensor(rng.normal(size=b_shape))
    r = _proj(rng, shape)
    return _scalarize(T.sub, r), [a, b]


@register("mul")
def _case_mul(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    a = Tensor(rng.normal(size=shape))
    b_shape = shape if rng.random() < 0.5 else (1, shape[1])
    b = Tensor(rng.normal(size=b_shape))
    r = _proj(rng, shape)
    return _scalarize(T.mul, r), [a, b]


@register("neg")
def _case_neg(rng):
    shape = (int(rng.integers(1, 5)),)
    a = Tensor(rng.normal(size=shape))
    r = _proj(rng, shape)
    return _scalarize(T.neg, r), [a]


@register("matmul")
def _case_matmul(rng):
    m, k, p = (int(rng.integers(1, 5)) for _ in range(3))
    a = Tensor(rng.normal(size=(m, k)))
    b = Tensor(rng.normal(size=(k, p)))
    r = _proj(rng, (m, p))
    return _scalarize(T.matmul, r), [a, b]


@register("transpose")
def _case_transpose(rng):
    m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    a = Tensor(rng.normal(size=(m, n)))
    r = _proj(rng, (n, m))
    return _scalarize(T.transpose, r), [a]


@register("reshape")
def _case_reshape(rng):
    m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    a = Tensor(rng.normal(size=(m, n)))
    r = _proj(rng, (m * n,))
    return _scalarize(lambda t: T.reshape(t, (m * n,)), r), [a]


@register("relu")
def _case_relu(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    a = Tensor(_away_from_zero(rng, shape))
    r = _proj(rng, shape)
    return _scalarize(T.relu, r), [a]


@register("sigmoid")
def _case_sigmoid(rng):
    shape = (int(rng.integers(1, 6)),)
    a = Tensor(rng.uniform(-4.0, 4.0, size=shape))
    r = _proj(rng, shape)
    return _scalarize(T.sigmoid, r), [a]


@register("log")
def _case_log(rng):
    shape = (int(rng.integers(1, 6)),)
    a = Tensor(_positive(rng, shape))
    r = _proj(rng, shape)
    return _scalarize(T.log, r), [a]


@register("sqrt")
def _case_sqrt(rng):
    shape = (int(rng.integers(1, 6)),)
    a = Tensor(_positive(rng, shape))
    r = _proj(rng, shape)
    return _scalarize(T.sqrt, r), [a]


@register("clamp")
def _case_clamp(rng):
    shape = (int(rng.integers(2, 7)),)
    # Values placed strictly inside or strictly outside the clamp window.
    a = Tensor(rng.choice([-2.0, 0.0, 2.0], size=shape) + rng.uniform(-0.3, 0.3, size=shape))
    r = _proj(rng, shape)
    return _scalarize(lambda t: T.clamp(t, -1.0, 1.0), r), [a]


@register("softmax")
def _case_softmax(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    a = Tensor(rng.normal(size=shape) * 2.0)
    r = _proj(rng, shape)
    return _scalarize(T.softmax, r), [a]


@register("log_softmax")
def _case_log_softmax(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    a = Tensor(rng.normal(size=shape) * 2.0)
    r = _proj(rng, shape)
    return _scalarize(T.log_softmax, r), [a]


@register("sum")
def _case_sum(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    a = Tensor(rng.normal(size=shape))
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    out_shape = np.sum(np.empty(shape), axis=axis).shape
    r = _proj(rng, out_shape)
    return _scalarize(lambda t: T.tsum(t, axis), r), [a]


@register("mean")
def _case_mean(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    a = Tensor(rng.normal(size=shape))
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    out_shape = np.mean(np.empty(shape), axis=axis).shape
    r = _proj(rng, out_shape)
    return _scalarize(lambda t: T.tmean(t, axis), r), [a]


@register("global_avg_pool")
def _case_gap(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    a = Tensor(rng.normal(size=(n, c, h, w)))
    r = _proj(rng, (n, c))
    return _scalarize(T.global_avg_pool, r), [a]


@register("l2_normalize")
def _case_l2norm(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    a = Tensor(rng.normal(size=shape) + 0.5)
    r = _proj(rng, shape)
    return _scalarize(T.l2_normalize, r), [a]


@register("concat")
def _case_concat(rng):
    cols = int(rng.integers(1, 4))
    rows = [int(rng.integers(1, 4)) for _ in range(3)]
    parts = [Tensor(rng.normal(size=(m, cols))) for m in rows]
    r = _proj(rng, (sum(rows), cols))

    def builder(*inputs):
        return T.tsum(T.concat(inputs, axis=0) * r)

    return builder, parts


@register("slice_rows")
def _case_slice(rng):
    n, c, h, w = 1, int(rng.integers(1, 3)), int(rng.integers(3, 7)), int(rng.integers(1, 4))
    a = Tensor(rng.normal(size=(n, c, h, w)))
    start = int(rng.integers(0, h - 1))
    stop = int(rng.integers(start + 1, h + 1))
    r = _proj(rng, (n, c, stop - start, w))
    return _scalarize(lambda t: T.slice_axis(t, 2, start, stop), r), [a]


@register("take_rows")
def _case_take_rows(rng):
    m, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    a = Tensor(rng.normal(size=(m, d)))
    idx = rng.integers(0, m, size=int(rng.integers(1, 7)))
    r = _proj(rng, (len(idx), d))
    return _scalarize(lambda t: T.take_rows(t, idx), r), [a]


@register("gather_pairs")
def _case_gather(rng):
    m, n = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    a = Tensor(rng.normal(size=(m, n)))
    k = int(rng.integers(1, 7))
    rows = rng.integers(0, m, size=k)
    cols = rng.integers(0, n, size=k)
    r = _proj(rng, (k,))
    return _scalarize(lambda t: T.gather_pairs(t, rows, cols), r), [a]


@register("conv2d")
def _case_conv2d(rng):
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(kh, kh + 4))
    w = int(rng.integers(kw, kw + 4))
    x = Tensor(rng.normal(size=(n, cin, h, w)))
    wt = Tensor(rng.normal(size=(cout, cin, kh, kw)))
    from .tensor import _conv_out_dim

    ho, wo = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(w, kw, stride, pad)
    r = _proj(rng, (n, cout, ho, wo))

    def builder(xx, ww):
        return T.tsum(T.conv2d(xx, ww, stride=stride, pad=pad) * r)

    return builder, [x, wt]


@register("batch_norm")
def _case_batch_norm(rng):
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    x = Tensor(rng.normal(size=(n, c, h, w)) * 1.5)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=(c,)))
    beta = Tensor(rng.normal(size=(c,)))
    training = bool(rng.random() < 0.5)
    rm = rng.normal(size=(c,))
    rv = rng.uniform(0.5, 1.5, size=(c,))
    r = _proj(rng, (n, c, h, w))

    def builder(xx, gg, bb):
        out = T.batch_norm(xx, gg, bb, rm.copy(), rv.copy(), training=training)
        return T.tsum(out * r)

    return builder, [x, gamma, beta]


@register("composite")
def _case_composite(rng):
    """Random 5-op chain mixing pointwise, matmul and reductions."""
    m, k = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    a = Tensor(rng.normal(size=(m, k)))
    b = Tensor(rng.normal(size=(k, m)))
    c = Tensor(_positive(rng, (m, m)))

    def builder(aa, bb, cc):
        h = T.matmul(aa, bb)        # (m, m)
        h = T.sigmoid(h)
        h = T.mul(h, cc)
        h = T.add(h, T.log(cc))
        return T.tmean(h)

    return builder, [a, b, c]


@register("shared_input")
def _case_shared(rng):
    """One tensor feeding two consumers: checks the accumulation sum rule."""
    shape = (int(rng.integers(2, 5)),)
    a = Tensor(rng.normal(size=shape))
    r1 = _proj(rng, shape)
    r2 = _proj(rng, ())

    def builder(aa):
        left = T.tsum(T.sigmoid(aa) * r1)
        right = T.tmean(T.mul(aa, aa)) * r2
        return T.add(left, right)

    return builder, [a]
