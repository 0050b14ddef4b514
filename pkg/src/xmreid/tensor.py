"""Minimal reverse-mode automatic differentiation engine.

Tensors wrap C-contiguous float64 numpy arrays (row-major flat storage)
and record the operations that produced them. `backward()` on a scalar
root accumulates d(root)/d(tensor) into `.grad` of every reachable tensor
with `requires_grad=True`. Gradients accumulate across calls until
explicitly zeroed, which lets the min-max alternation share one graph API.

Every differentiable op here is covered by the finite-difference registry
in gradcheck.py.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

# Inputs to log() are clamped to [LOG_EPS, inf); discriminator outputs are
# clamped to [LOG_EPS, 1 - LOG_EPS] before any log. Keeps every loss term
# finite for any discriminator output.
LOG_EPS = 1e-7

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation forwards,
    frozen-extractor forwards in the discriminator phase)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional float64 array with an accumulated gradient.

    `grad` is materialized lazily but semantically starts at zero and has
    the same shape as `data`.
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)

    # -- gradient storage -------------------------------------------------

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self._grad is None:
            # Copy: callers may hand us views or arrays they also feed to
            # other parents.
            self._grad = np.array(delta, dtype=np.float64)
            if self._grad.shape != self.data.shape:
                self._grad = np.broadcast_to(self._grad, self.data.shape).copy()
        else:
            self._grad += delta

    def zero_grad(self) -> None:
        self._grad = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar w.r.t. every reachable
        tensor that requires grad. Visits each graph node exactly once, in
        reverse creation order (a valid topological order by construction).

        Each call computes a fresh adjoint pass and adds it onto whatever
        grads were already stored, so calling twice without zeroing doubles
        the grads.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar root, got shape {self.shape}"
            )
        nodes: list[Tensor] = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        # Closures accumulate into ._grad; park prior accumulations aside so
        # this pass propagates pure adjoints, then merge them back.
        saved = [(n, n._grad) for n in nodes if n._grad is not None]
        for n, _ in saved:
            n._grad = None
        self.accumulate_grad(np.ones_like(self.data))
        for node in nodes:
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)
        for n, prior in saved:
            if n._grad is None:
                n._grad = prior
            else:
                n._grad += prior

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; record the graph edge only when grads are on and
    some parent participates in differentiation."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out dimensions that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Two-sided formulation avoids overflow in exp for large |x|.
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    """Natural log with the input clamped to [LOG_EPS, inf)."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_EPS)
    out_data = np.log(clamped)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > LOG_EPS) / clamped)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * inside)

    return _make(out_data, (a,), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for overflow safety."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a) -> Tensor:
    """Stabilized log-sum-exp form over the last axis."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            else:
                a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g / count, a.shape).copy())
            else:
                a.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g / count, axis), a.shape).copy()
                )

    return _make(out_data, (a,), backward)


def global_avg_pool(a) -> Tensor:
    """Spatial mean per channel: (C,H,W) -> (C,) or (N,C,H,W) -> (N,C)."""
    a = as_tensor(a)
    if a.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs (C,H,W) or (N,C,H,W), got {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    if h < 1 or w < 1:
        raise ShapeError(f"empty spatial extent in {a.shape}")
    out_data = a.data.mean(axis=(-2, -1))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(
                np.broadcast_to(g[..., None, None] / (h * w), a.shape).copy()
            )

    return _make(out_data, (a,), backward)


def l2_normalize(a) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    out_data = a.data / norm

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - out_data * dot) / norm)

    return _make(out_data, (a,), backward)


# -- structural ops -----------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise UsageError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out_data, ts, backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (striping uses the height axis)."""
    a = as_tensor(a)
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(
            f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


def take_rows(a, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


def gather_pairs(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick a[rows[k], cols[k]] for each k from a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_pairs needs a 2-D tensor, got {a.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out_data = a.data[r, c]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (r, c), g)
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


# -- convolution --------------------------------------------------------------


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (C_in,H,W) or (N,C_in,H,W); w: (C_out,C_in,kh,kw). Output spatial
    dims follow floor((H + 2*pad - kh)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs (N,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    n, cin, h, wid = xd.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    ho = _conv_out_dim(h, kh, stride, pad)
    wo = _conv_out_dim(wid, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {w.shape}, "
            f"stride {stride}, pad {pad}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out_data = (wm @ cols).reshape(n, cout, ho, wo)
    if unbatched:
        out_data = out_data[0]

    def backward(g):
        gb = g[None] if unbatched else g
        gr = gb.reshape(n, cout, ho * wo)
        if w.requires_grad:
            dw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw.reshape(w.shape))
        if x.requires_grad:
            ph, pw = kh - 1 - pad, kw - 1 - pad
            if stride == 1 and ph >= 0 and pw >= 0:
                # dx is the cross-correlation of g with spatially flipped,
                # channel-transposed kernels: one gemm instead of a scatter.
                wt = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                ).reshape(cin, -1)
                gp = np.pad(gb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                gcols = _im2col(gp, kh, kw, 1, h, wid)
                dx = (wt @ gcols).reshape(n, cin, h, wid)
            else:
                dcols = np.matmul(wm.T, gr).reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride,
                            j : j + stride * wo : stride] += dcols[:, :, i, j]
                dx = dxp[:, :, pad : pad + h, pad : pad + wid] if pad else dxp
            x.accumulate_grad(dx[0] if unbatched else dx)

    return _make(out_data, (x, w), backward)


# -- batch normalization --------------------------------------------------------


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool | None = None,
) -> Tensor:
    """Per-channel batch normalization for (N,C,H,W), (C,H,W) or (N,C) input.

    Training mode normalizes with batch statistics (gradient flows through
    them); evaluation mode uses the frozen running statistics. Running
    buffers are plain numpy arrays mutated in place when `update_stats`.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    elif xd.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    else:
        raise ShapeError(f"batch_norm needs 2-D or 4-D input, got {x.shape}")
    if update_stats is None:
        update_stats = training
    count = xd.size // xd.shape[1]
    gshape = gamma.data.reshape(bshape)
    bshape_arr = beta.data.reshape(bshape)

    if training:
        mean = xd.mean(axis=axes)
        xm = xd - mean.reshape(bshape)
        var = np.mean(xm * xm, axis=axes)
        if update_stats:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xm * inv_std.reshape(bshape)
    else:
        mean = running_mean
        var = running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out_data = gshape * xhat + bshape_arr
    if unbatched:
        out_data = out_data[0]

    def backward(g):
        gb = g[None] if unbatched else g
        if gamma.requires_grad:
            gamma.accumulate_grad((gb * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(gb.sum(axis=axes))
        if x.requires_grad:
            gy = gb * gshape
            if training:
                # Gradient through the batch statistics.
                mean_gy = gy.mean(axis=axes).reshape(bshape)
                mean_gy_xhat = (gy * xhat).mean(axis=axes).reshape(bshape)
                dx = inv_std.reshape(bshape) * (gy - mean_gy - xhat * mean_gy_xhat)
            else:
                dx = gy * inv_std.reshape(bshape)
            x.accumulate_grad(dx[0] if unbatched else dx)

    return _make(out_data, (x, gamma, beta), backward)


# -- optimizer ---------------------------------------------------------------


def sgd_momentum_step(
    params: Sequence[Tensor],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """v <- momentum*v + grad; p <- p - lr*v; grads zeroed afterwards."""
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise UsageError(f"momentum must be in [0, 1), got {momentum}")
    for p, v in zip(params, velocities):
        g = p._grad if p._grad is not None else 0.0
        v *= momentum
        v += g
        p.data -= lr * v
        p.zero_grad()


class SGDMomentum:
    """SGD with momentum over named parameter groups with per-group rates."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], momentum: float = 0.9):
        self.momentum = momentum
        self.groups = [(list(params), lr) for params, lr in groups]
        self.velocities = [
            [np.zeros_like(p.data) for p in params] for params, _ in self.groups
        ]

    def step(self) -> None:
        for (params, lr), vels in zip(self.groups, self.velocities):
            sgd_momentum_step(params, vels, lr, self.momentum)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        """Velocity buffers in deterministic group/param order."""
        return [v for vels in self.velocities for v in vels]

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        flat = [v for vels in self.velocities for v in vels]
        if len(arrays) != len(flat):
            raise UsageError(
                f"optimizer state mismatch: {len(arrays)} arrays for {len(flat)} buffers"
            )
        for buf, arr in zip(flat, arrays):
            if buf.shape != arr.shape:
                raise UsageError(f"velocity shape mismatch: {buf.shape} vs {arr.shape}")
            buf[...] = arr
