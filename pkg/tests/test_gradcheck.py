"""Finite-difference verification of every registered differentiable op."""

import numpy as np
import pytest

from xmreid import gradcheck as gc
from xmreid import tensor as T
from xmreid.rng import new_rng
from xmreid.tensor import Tensor

EXPECTED_OPS = {
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape",
    "relu", "sigmoid", "log", "sqrt", "clamp", "softmax", "log_softmax",
    "sum", "mean", "global_avg_pool", "l2_normalize", "concat",
    "slice_rows", "take_rows", "gather_pairs", "conv2d", "batch_norm",
    "composite", "shared_input",
}


def test_registry_covers_the_full_op_set():
    assert EXPECTED_OPS <= set(gc.registered_ops())


@pytest.mark.parametrize("op", sorted(EXPECTED_OPS))
def test_op_matches_finite_differences(op):
    rng = new_rng(123)
    worst = gc.run_op(op, cases=20, rng=rng)
    assert worst < 1e-5, f"{op}: worst relative error {worst:.3e}"


def test_corrupted_gradient_is_detected(monkeypatch):
    """The checker must flag a deliberately wrong backward rule."""

    def bad_sigmoid(a):
        a = T.as_tensor(a)
        out = T.sigmoid(a)
        good = out._backward

        def corrupted(g):
            a.accumulate_grad(g * 0.123)  # wrong local gradient

        if good is not None:
            out._backward = corrupted
        return out

    rng = new_rng(9)
    a = Tensor(rng.normal(size=(4,)))
    r = rng.normal(size=(4,))
    err = gc.check_case(lambda t: T.tsum(bad_sigmoid(t) * r), [a])
    assert err > 1e-3


def test_matmul_example_tolerance():
    # The documented matmul gradient example at its stated tolerance.
    rng = new_rng(2024)
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    err = gc.check_case(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])
    assert err < 1e-6


def test_global_avg_pool_gradient_is_uniform():
    x = Tensor(np.arange(12.0).reshape(1, 3, 4), requires_grad=True)
    T.tsum(T.global_avg_pool(x)).backward()
    np.testing.assert_allclose(x.grad, 1.0 / 12.0)
