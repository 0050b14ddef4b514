"""Unit tests for the autodiff core: op values, backward semantics, SGD."""

import numpy as np
import pytest

from xmreid import tensor as T
from xmreid.errors import NumericError, ShapeError, UsageError
from xmreid.tensor import Tensor


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradients(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        T.tsum(T.matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))


class TestConv2d:
    def test_scalar_kernel_scales(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        out = T.conv2d(x, w, stride=1, pad=0)
        np.testing.assert_array_equal(out.data, [[[2.0, 4.0], [6.0, 8.0]]])

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.zeros((2, 5, 4)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out = T.conv2d(x, w, stride=1, pad=1)
        assert not out.data.any()

    def test_output_dims(self):
        x = Tensor(np.zeros((1, 3, 96, 48)))
        w = Tensor(np.zeros((8, 3, 3, 3)))
        assert T.conv2d(x, w, stride=2, pad=1).shape == (1, 8, 48, 24)

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_matches_direct_correlation(self):
        # Brute-force cross-correlation oracle on a random case.
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 2))
        stride, pad = 2, 1
        out = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        expect = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 2]
                        expect[n, o, i, j] = (patch * w[o]).sum()
        np.testing.assert_allclose(out, expect, atol=1e-12)


class TestPointwise:
    def test_global_avg_pool_mean(self):
        out = T.global_avg_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(out.data, [2.5])

    def test_global_avg_pool_constant_channel(self):
        out = T.global_avg_pool(Tensor(np.full((2, 3, 4), 0.7)))
        np.testing.assert_allclose(out.data, [0.7, 0.7])

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_shift_safe(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])
        assert np.isfinite(out).all()

    def test_softmax_hand_value(self):
        out = T.softmax(Tensor([0.0, np.log(3.0)])).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            out = T.softmax(Tensor(rng.normal(size=(4, 7)) * 10)).data
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
            assert (out > 0).all()

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=9)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 123.456)).data
        assert np.abs(a - b).max() < 1e-12

    def test_softmax_rejects_nan(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([np.nan, 0.0]))

    def test_log_clamps_low_inputs(self):
        out = T.log(Tensor([1e-30, 0.0, 1.0]))
        np.testing.assert_allclose(out.data[:2], np.log(1e-7))
        assert out.data[2] == 0.0

    def test_log_clamp_grad_zero_in_flat_region(self):
        x = Tensor([1e-30, 2.0], requires_grad=True)
        T.tsum(T.log(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.5])

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(5)
        out = T.l2_normalize(Tensor(rng.normal(size=(6, 9)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)


class TestBackwardSemantics:
    def test_linear(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.tsum(x * 3.0)
        y.backward()
        np.testing.assert_allclose(x.grad, [3.0])

    def test_power_rule(self):
        x = Tensor([5.0], requires_grad=True)
        T.tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, [10.0])

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2.0).backward()

    def test_accumulation_doubles_without_zeroing(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.tsum(x * 3.0)
        y.backward()
        y.backward()
        np.testing.assert_allclose(x.grad, [6.0])
        x.zero_grad()
        y.backward()
        np.testing.assert_allclose(x.grad, [3.0])

    def test_fanout_sum_rule(self):
        # One input feeding two consumers accumulates both contributions.
        x = Tensor([1.5], requires_grad=True)
        y = T.add(T.tsum(x * 2.0), T.tsum(x * x))
        y.backward()
        np.testing.assert_allclose(x.grad, [2.0 + 2.0 * 1.5])

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert y._backward is None and not y.requires_grad

    def test_frozen_leaf_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        w = Tensor([3.0], requires_grad=False)
        T.tsum(x * w).backward()
        assert w._grad is None
        np.testing.assert_allclose(x.grad, [3.0])


class TestSGDMomentum:
    def test_plain_sgd(self):
        p = Tensor([0.0], requires_grad=True)
        p.accumulate_grad(np.array([1.0]))
        v = [np.zeros(1)]
        T.sgd_momentum_step([p], v, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p.data, [-0.1])
        assert p._grad is None

    def test_zero_grad_zero_velocity_is_fixed_point(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        v = [np.zeros(2)]
        T.sgd_momentum_step([p], v, lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_momentum_recurrence(self):
        # v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9.
        p = Tensor([0.0], requires_grad=True)
        v = [np.zeros(1)]
        for expect in (-1.0, -2.9):
            p.accumulate_grad(np.array([1.0]))
            T.sgd_momentum_step([p], v, lr=1.0, momentum=0.9)
            np.testing.assert_allclose(p.data, [expect])

    def test_optimizer_groups(self):
        a = Tensor([0.0], requires_grad=True)
        b = Tensor([0.0], requires_grad=True)
        opt = T.SGDMomentum([([a], 0.1), ([b], 1.0)], momentum=0.0)
        a.accumulate_grad(np.array([1.0]))
        b.accumulate_grad(np.array([1.0]))
        opt.step()
        np.testing.assert_allclose(a.data, [-0.1])
        np.testing.assert_allclose(b.data, [-1.0])

    def test_invalid_hyperparameters(self):
        p = Tensor([0.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.sgd_momentum_step([p], [np.zeros(1)], lr=0.0, momentum=0.0)
        with pytest.raises(UsageError):
            T.sgd_momentum_step([p], [np.zeros(1)], lr=0.1, momentum=1.0)


class TestStructuralOps:
    def test_concat_and_slice_roundtrip(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.arange(6.0, 12.0).reshape(2, 3))
        cat = T.concat([a, b], axis=0)
        np.testing.assert_array_equal(T.slice_axis(cat, 0, 2, 4).data, b.data)

    def test_slice_out_of_range(self):
        with pytest.raises(ShapeError):
            T.slice_axis(Tensor(np.zeros((2, 3))), 1, 2, 5)

    def test_take_rows_permutation_inverts(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        perm = np.array([2, 0, 3, 1])
        inv = np.argsort(perm)
        out = T.take_rows(T.take_rows(x, perm), inv)
        np.testing.assert_array_equal(out.data, x.data)

    def test_gather_pairs(self):
        x = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
        out = T.gather_pairs(x, [0, 2, 2], [1, 1, 1])
        np.testing.assert_array_equal(out.data, [1.0, 7.0, 7.0])
        T.tsum(out).backward()
        # Repeated picks scatter-add.
        assert x.grad[2, 1] == 2.0 and x.grad[0, 1] == 1.0


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(8, 4, 5, 5)))
        gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
        rm, rv = np.zeros(4), np.ones(4)
        out = T.batch_norm(x, gamma, beta, rm, rv, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_eval_mode_uses_frozen_stats(self):
        x = Tensor(np.ones((2, 1, 2, 2)) * 5.0)
        gamma, beta = Tensor(np.ones(1)), Tensor(np.zeros(1))
        rm, rv = np.array([3.0]), np.array([4.0])
        out = T.batch_norm(x, gamma, beta, rm, rv, training=False).data
        np.testing.assert_allclose(out, (5.0 - 3.0) / np.sqrt(4.0 + 1e-5))
        # Frozen stats are untouched.
        assert rm[0] == 3.0 and rv[0] == 4.0

    def test_update_stats_flag(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 2, 3, 3)))
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm(x, gamma, beta, rm, rv, training=True, update_stats=False)
        assert not rm.any() and (rv == 1.0).all()
        T.batch_norm(x, gamma, beta, rm, rv, training=True, update_stats=True)
        assert rm.any()
