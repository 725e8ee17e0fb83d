"""Forward and backward kernels for every registered layer and loss kind.

Kernels are dtype-preserving (the same code runs the f32 backends and the f64
oracle) and take an accumulation strategy so two honest backends can differ by
benign floating-point reordering only.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class Ops:
    """Canonical accumulation order."""

    name = "naive"

    def sum(self, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims=False):
        return np.mean(x, axis=axis, keepdims=keepdims)

    def matmul(self, a, b):
        return a @ b

    def div(self, num, den):
        return num / den


class ReorderedOps(Ops):
    """Algebraically equivalent kernels with permuted accumulation order.

    Models the benign cross-library floating-point deviation band: results
    differ from the canonical order by rounding only.
    """

    name = "reordered"

    def sum(self, x, axis=None, keepdims=False):
        if axis is None:
            return np.sum(np.flip(x), keepdims=keepdims)
        axes = axis if isinstance(axis, tuple) else (axis,)
        return np.sum(np.flip(x, axis=axes), axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims=False):
        if axis is None:
            n = x.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([x.shape[a] for a in axes]))
        inv = np.asarray(1.0, dtype=x.dtype) / np.asarray(n, dtype=x.dtype)
        return self.sum(x, axis=axis, keepdims=keepdims) * inv

    def matmul(self, a, b):
        # reversed contraction order: same value, different rounding
        return a[..., ::-1] @ b[::-1, ...]

    def div(self, num, den):
        one = np.asarray(1.0, dtype=np.result_type(num, den))
        return num * (one / den)


NAIVE_OPS = Ops()
REORDERED_OPS = ReorderedOps()


@dataclass(frozen=True)
class Kernel:
    fwd: Callable  # (xs, ws, params, ops) -> y
    bwd: Callable  # (xs, ws, params, gy, ops) -> [gx per input]


@dataclass(frozen=True)
class LossKernel:
    fwd: Callable  # (pred, labels, ops) -> scalar
    grad: Callable  # (pred, labels, ops) -> tensor like pred


# ---------------------------------------------------------------------------
# padding helpers (spatial dims are axes 1..nd, channels last, batch first)

def _pad_amounts(n: int, k: int, s: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        left = total // 2
        return out, left, total - left
    return (n - k) // s + 1, 0, 0


def _pad_input(x, k: int, s: int, padding: str, nd: int, value: float = 0.0):
    pads = [(0, 0)]
    outs = []
    for d in range(nd):
        out, lo, hi = _pad_amounts(x.shape[1 + d], k, s, padding)
        outs.append(out)
        pads.append((lo, hi))
    pads.append((0, 0))
    if padding == "same" and any(p != (0, 0) for p in pads):
        x = np.pad(x, pads, constant_values=value)
    return x, tuple(outs)


def _offset_slices(offset: tuple[int, ...], outs: tuple[int, ...], s: int):
    sl = [slice(None)]
    for o, out in zip(offset, outs):
        sl.append(slice(o, o + (out - 1) * s + 1, s))
    sl.append(slice(None))
    return tuple(sl)


# ---------------------------------------------------------------------------
# convolutions

def _conv_fwd(nd: int):
    def fwd(xs, ws, params, ops):
        (x,) = xs
        w, b = ws
        k, s, padding = params["kernel"], params["strides"], params["padding"]
        xp, outs = _pad_input(x, k, s, padding, nd)
        batch = x.shape[0]
        f = w.shape[-1]
        y = np.zeros((batch, *outs, f), dtype=x.dtype)
        for off in itertools.product(range(k), repeat=nd):
            patch = xp[_offset_slices(off, outs, s)]
            y += ops.matmul(patch, w[off])
        return y + b

    return fwd


def _conv_bwd(nd: int):
    def bwd(xs, ws, params, gy, ops):
        (x,) = xs
        w, _ = ws
        k, s, padding = params["kernel"], params["strides"], params["padding"]
        xp, outs = _pad_input(x, k, s, padding, nd)
        gxp = np.zeros_like(xp)
        for off in itertools.product(range(k), repeat=nd):
            gxp[_offset_slices(off, outs, s)] += ops.matmul(gy, w[off].T)
        return [_crop_like(gxp, x, k, s, padding, nd)]

    return bwd


def _crop_like(gxp, x, k, s, padding, nd):
    if padding != "same":
        return gxp
    sl = [slice(None)]
    for d in range(nd):
        _, lo, _ = _pad_amounts(x.shape[1 + d], k, s, padding)
        sl.append(slice(lo, lo + x.shape[1 + d]))
    sl.append(slice(None))
    return gxp[tuple(sl)]


def _depthwise_fwd(xs, ws, params, ops):
    (x,) = xs
    (w,) = ws
    k, s, padding = params["kernel"], params["strides"], params["padding"]
    xp, outs = _pad_input(x, k, s, padding, 2)
    y = np.zeros((x.shape[0], *outs, x.shape[-1]), dtype=x.dtype)
    for off in itertools.product(range(k), repeat=2):
        y += xp[_offset_slices(off, outs, s)] * w[off]
    return y


def _depthwise_bwd(xs, ws, params, gy, ops):
    (x,) = xs
    (w,) = ws
    k, s, padding = params["kernel"], params["strides"], params["padding"]
    xp, outs = _pad_input(x, k, s, padding, 2)
    gxp = np.zeros_like(xp)
    for off in itertools.product(range(k), repeat=2):
        gxp[_offset_slices(off, outs, s)] += gy * w[off]
    return [_crop_like(gxp, x, k, s, padding, 2)]


# ---------------------------------------------------------------------------
# pooling

def _pool_geometry(x, params, nd: int, pad_value: float):
    k, s, padding = params["pool_size"], params["strides"], params["padding"]
    xp, outs = _pad_input(x, k, s, padding, nd, value=pad_value)
    offsets = list(itertools.product(range(k), repeat=nd))
    return xp, outs, offsets, k, s, padding


def _max_pool_fwd(nd: int):
    def fwd(xs, ws, params, ops):
        (x,) = xs
        xp, outs, offsets, _, s, _ = _pool_geometry(x, params, nd, -np.inf)
        y = None
        for off in offsets:
            patch = xp[_offset_slices(off, outs, s)]
            y = patch.copy() if y is None else np.maximum(y, patch)
        return y

    return fwd


def _max_pool_bwd(nd: int, *, spread_ties: bool = False):
    def bwd(xs, ws, params, gy, ops):
        (x,) = xs
        xp, outs, offsets, k, s, padding = _pool_geometry(x, params, nd, -np.inf)
        best = None
        best_idx = None
        for i, off in enumerate(offsets):
            patch = xp[_offset_slices(off, outs, s)]
            if best is None:
                best = patch.copy()
                best_idx = np.zeros(patch.shape, dtype=np.int64)
            else:
                mask = patch > best
                best = np.where(mask, patch, best)
                best_idx = np.where(mask, i, best_idx)
        gxp = np.zeros_like(xp)
        for i, off in enumerate(offsets):
            if spread_ties:
                patch = xp[_offset_slices(off, outs, s)]
                take = patch == best
            else:
                take = best_idx == i
            gxp[_offset_slices(off, outs, s)] += gy * take
        gx = _crop_like_pool(gxp, x, params, nd)
        return [gx]

    return bwd


def _crop_like_pool(gxp, x, params, nd):
    k, s, padding = params["pool_size"], params["strides"], params["padding"]
    if padding != "same":
        return gxp
    sl = [slice(None)]
    for d in range(nd):
        _, lo, _ = _pad_amounts(x.shape[1 + d], k, s, padding)
        sl.append(slice(lo, lo + x.shape[1 + d]))
    sl.append(slice(None))
    return gxp[tuple(sl)]


def _avg_pool_fwd(nd: int):
    def fwd(xs, ws, params, ops):
        (x,) = xs
        xp, outs, offsets, k, s, _ = _pool_geometry(x, params, nd, 0.0)
        ones = np.ones(x.shape, dtype=x.dtype)
        onesp, _ = _pad_input(ones, k, s, params["padding"], nd, value=0.0)
        acc = np.zeros((x.shape[0], *outs, x.shape[-1]), dtype=x.dtype)
        cnt = np.zeros_like(acc)
        for off in offsets:
            acc += xp[_offset_slices(off, outs, s)]
            cnt += onesp[_offset_slices(off, outs, s)]
        return ops.div(acc, cnt)  # padding excluded from the divisor

    return fwd


def _avg_pool_bwd(nd: int):
    def bwd(xs, ws, params, gy, ops):
        (x,) = xs
        xp, outs, offsets, k, s, _ = _pool_geometry(x, params, nd, 0.0)
        ones = np.ones(x.shape, dtype=x.dtype)
        onesp, _ = _pad_input(ones, k, s, params["padding"], nd, value=0.0)
        cnt = np.zeros((x.shape[0], *outs, x.shape[-1]), dtype=x.dtype)
        for off in offsets:
            cnt += onesp[_offset_slices(off, outs, s)]
        g = gy / cnt
        gxp = np.zeros_like(xp)
        for off in offsets:
            gxp[_offset_slices(off, outs, s)] += g
        return [_crop_like_pool(gxp, x, params, nd)]

    return bwd


def _global_max_fwd(xs, ws, params, ops):
    (x,) = xs
    axes = tuple(range(1, x.ndim - 1))
    return np.max(x, axis=axes)


def _global_max_bwd(xs, ws, params, gy, ops):
    (x,) = xs
    batch, ch = x.shape[0], x.shape[-1]
    flat = x.reshape(batch, -1, ch)
    idx = np.argmax(flat, axis=1)  # first occurrence
    gx = np.zeros_like(flat)
    np.put_along_axis(gx, idx[:, None, :], gy[:, None, :], axis=1)
    return [gx.reshape(x.shape)]


def _global_avg_fwd(xs, ws, params, ops):
    (x,) = xs
    axes = tuple(range(1, x.ndim - 1))
    return ops.mean(x, axis=axes)


def _global_avg_bwd(xs, ws, params, gy, ops):
    (x,) = xs
    n = int(np.prod(x.shape[1:-1]))
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
    return [np.broadcast_to(gy.reshape(shape) / n, x.shape).astype(x.dtype).copy()]


# ---------------------------------------------------------------------------
# normalization, activations, reshapes, recurrent

_BN_EPS = 1e-3


def _bn_fwd(xs, ws, params, ops):
    (x,) = xs
    gamma, beta = ws
    axes = tuple(range(x.ndim - 1))
    m = ops.mean(x, axis=axes, keepdims=True)
    v = ops.mean((x - m) ** 2, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + np.asarray(_BN_EPS, dtype=x.dtype))
    return gamma * (x - m) * inv + beta


def _bn_bwd(xs, ws, params, gy, ops):
    (x,) = xs
    gamma, _ = ws
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    m = ops.mean(x, axis=axes, keepdims=True)
    xc = x - m
    v = ops.mean(xc ** 2, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + np.asarray(_BN_EPS, dtype=x.dtype))
    gxn = gy * gamma
    gv = ops.sum(gxn * xc, axis=axes, keepdims=True) * (-0.5) * inv ** 3
    gm = ops.sum(-gxn * inv, axis=axes, keepdims=True) + gv * ops.mean(-2.0 * xc, axis=axes, keepdims=True)
    gx = gxn * inv + gv * 2.0 * xc / n + gm / n
    return [gx.astype(x.dtype)]


def _relu_fwd(xs, ws, params, ops):
    return np.maximum(xs[0], 0)


def _relu_bwd(xs, ws, params, gy, ops):
    return [gy * (xs[0] > 0)]


def _leaky_relu_fwd(xs, ws, params, ops):
    x = xs[0]
    a = np.asarray(params["alpha"], dtype=x.dtype)
    return np.where(x > 0, x, a * x)


def _leaky_relu_bwd(xs, ws, params, gy, ops):
    x = xs[0]
    a = np.asarray(params["alpha"], dtype=x.dtype)
    return [gy * np.where(x > 0, x.dtype.type(1), a)]


def _elu_fwd(xs, ws, params, ops):
    x = xs[0]
    a = np.asarray(params["alpha"], dtype=x.dtype)
    return np.where(x > 0, x, a * np.expm1(np.minimum(x, 0)))


def _elu_bwd(xs, ws, params, gy, ops):
    x = xs[0]
    a = np.asarray(params["alpha"], dtype=x.dtype)
    return [gy * np.where(x > 0, x.dtype.type(1), a * np.exp(np.minimum(x, 0)))]


def _sigmoid_fwd(xs, ws, params, ops):
    x = xs[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_bwd(xs, ws, params, gy, ops):
    y = _sigmoid_fwd(xs, ws, params, ops)
    return [gy * y * (1.0 - y)]


def _tanh_fwd(xs, ws, params, ops):
    return np.tanh(xs[0])


def _tanh_bwd(xs, ws, params, gy, ops):
    y = np.tanh(xs[0])
    return [gy * (1.0 - y * y)]


def _softmax_fwd(xs, ws, params, ops):
    x = xs[0]
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return ops.div(e, ops.sum(e, axis=-1, keepdims=True))


def _softmax_bwd(xs, ws, params, gy, ops):
    y = _softmax_fwd(xs, ws, params, ops)
    dot = ops.sum(gy * y, axis=-1, keepdims=True)
    return [y * (gy - dot)]


def _dense_fwd(xs, ws, params, ops):
    w, b = ws
    return ops.matmul(xs[0], w) + b


def _dense_bwd(xs, ws, params, gy, ops):
    w, _ = ws
    return [ops.matmul(gy, w.T)]


def _flatten_fwd(xs, ws, params, ops):
    x = xs[0]
    return x.reshape(x.shape[0], -1)


def _flatten_bwd(xs, ws, params, gy, ops):
    return [gy.reshape(xs[0].shape)]


def _reshape_fwd(xs, ws, params, ops):
    x = xs[0]
    return x.reshape((x.shape[0], *params["target"]))


def _reshape_bwd(xs, ws, params, gy, ops):
    return [gy.reshape(xs[0].shape)]


def _rnn_states(x, ws):
    wx, wh, b = ws
    batch, steps, _ = x.shape
    h = np.zeros((batch, wx.shape[1]), dtype=x.dtype)
    states = []
    for t in range(steps):
        h = np.tanh(x[:, t, :] @ wx + h @ wh + b)
        states.append(h)
    return states


def _rnn_fwd(xs, ws, params, ops):
    return _rnn_states(xs[0], ws)[-1]


def _rnn_bwd(xs, ws, params, gy, ops):
    x = xs[0]
    wx, wh, _ = ws
    states = _rnn_states(x, ws)
    gx = np.zeros_like(x)
    gh = gy
    for t in range(x.shape[1] - 1, -1, -1):
        gz = gh * (1.0 - states[t] * states[t])
        gx[:, t, :] = ops.matmul(gz, wx.T)
        gh = ops.matmul(gz, wh.T)
    return [gx]


# ---------------------------------------------------------------------------
# merges

def _add_fwd(xs, ws, params, ops):
    y = xs[0].copy()
    for x in xs[1:]:
        y += x
    return y


def _add_bwd(xs, ws, params, gy, ops):
    return [gy.copy() for _ in xs]


def _multiply_fwd(xs, ws, params, ops):
    y = xs[0].copy()
    for x in xs[1:]:
        y *= x
    return y


def _multiply_bwd(xs, ws, params, gy, ops):
    grads = []
    for i in range(len(xs)):
        g = gy.copy()
        for j, x in enumerate(xs):
            if j != i:
                g *= x
        grads.append(g)
    return grads


def _average_fwd(xs, ws, params, ops):
    return ops.div(_add_fwd(xs, ws, params, ops), np.asarray(len(xs), dtype=xs[0].dtype))


def _average_bwd(xs, ws, params, gy, ops):
    n = np.asarray(len(xs), dtype=gy.dtype)
    return [gy / n for _ in xs]


def _maximum_fwd(xs, ws, params, ops):
    y = xs[0].copy()
    for x in xs[1:]:
        y = np.maximum(y, x)
    return y


def _maximum_bwd(xs, ws, params, gy, ops):
    # gradient routes to the first input attaining the maximum
    y = _maximum_fwd(xs, ws, params, ops)
    claimed = np.zeros(y.shape, dtype=bool)
    grads = []
    for x in xs:
        take = (x == y) & ~claimed
        claimed |= take
        grads.append(gy * take)
    return grads


def _concat_fwd(xs, ws, params, ops):
    return np.concatenate(xs, axis=-1)


def _concat_bwd(xs, ws, params, gy, ops):
    sizes = [x.shape[-1] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return [g.copy() for g in np.split(gy, splits, axis=-1)]


def _input_fwd(xs, ws, params, ops):
    return xs[0]


def _input_bwd(xs, ws, params, gy, ops):
    return [gy]


KERNELS: dict[str, Kernel] = {
    "input": Kernel(_input_fwd, _input_bwd),
    "dense": Kernel(_dense_fwd, _dense_bwd),
    "conv1d": Kernel(_conv_fwd(1), _conv_bwd(1)),
    "conv2d": Kernel(_conv_fwd(2), _conv_bwd(2)),
    "conv3d": Kernel(_conv_fwd(3), _conv_bwd(3)),
    "depthwise_conv2d": Kernel(_depthwise_fwd, _depthwise_bwd),
    "max_pooling1d": Kernel(_max_pool_fwd(1), _max_pool_bwd(1)),
    "max_pooling2d": Kernel(_max_pool_fwd(2), _max_pool_bwd(2)),
    "average_pooling1d": Kernel(_avg_pool_fwd(1), _avg_pool_bwd(1)),
    "average_pooling2d": Kernel(_avg_pool_fwd(2), _avg_pool_bwd(2)),
    "global_max_pooling1d": Kernel(_global_max_fwd, _global_max_bwd),
    "global_max_pooling2d": Kernel(_global_max_fwd, _global_max_bwd),
    "global_average_pooling1d": Kernel(_global_avg_fwd, _global_avg_bwd),
    "global_average_pooling2d": Kernel(_global_avg_fwd, _global_avg_bwd),
    "batch_normalization": Kernel(_bn_fwd, _bn_bwd),
    "relu": Kernel(_relu_fwd, _relu_bwd),
    "leaky_relu": Kernel(_leaky_relu_fwd, _leaky_relu_bwd),
    "elu": Kernel(_elu_fwd, _elu_bwd),
    "sigmoid": Kernel(_sigmoid_fwd, _sigmoid_bwd),
    "tanh": Kernel(_tanh_fwd, _tanh_bwd),
    "softmax": Kernel(_softmax_fwd, _softmax_bwd),
    "simple_rnn": Kernel(_rnn_fwd, _rnn_bwd),
    "flatten": Kernel(_flatten_fwd, _flatten_bwd),
    "reshape": Kernel(_reshape_fwd, _reshape_bwd),
    "add": Kernel(_add_fwd, _add_bwd),
    "multiply": Kernel(_multiply_fwd, _multiply_bwd),
    "average": Kernel(_average_fwd, _average_bwd),
    "maximum": Kernel(_maximum_fwd, _maximum_bwd),
    "concatenate": Kernel(_concat_fwd, _concat_bwd),
}


# ---------------------------------------------------------------------------
# losses (scalar output averaged over every element / lead position)

# probability floor for log/ratio losses; keeps gradients bounded at 1e7 while
# still resolving one-ulp-of-1 saturation differences at f32
_PROB_EPS = 1e-7


def _tiny(dtype) -> float:
    return float(np.finfo(dtype).tiny)


def _mse_fwd(pred, labels, ops):
    d = pred - labels
    return ops.mean(d * d)


def _mse_grad(pred, labels, ops):
    return (2.0 * (pred - labels) / pred.size).astype(pred.dtype)


def _mape_fwd(pred, labels, ops):
    denom = np.maximum(np.abs(labels), np.asarray(1e-7, dtype=pred.dtype))
    return np.asarray(100.0, dtype=pred.dtype) * ops.mean(np.abs(labels - pred) / denom)


def _mape_grad(pred, labels, ops):
    denom = np.maximum(np.abs(labels), np.asarray(1e-7, dtype=pred.dtype))
    return (100.0 * np.sign(pred - labels) / denom / pred.size).astype(pred.dtype)


def _bce_elements(pred, labels):
    eps = pred.dtype.type(_PROB_EPS)
    one = pred.dtype.type(1)
    return -(labels * np.log(np.maximum(pred, eps))
             + (one - labels) * np.log(np.maximum(one - pred, eps)))


def _bce_fwd(pred, labels, ops):
    return ops.mean(_bce_elements(pred, labels))


def _bce_grad(pred, labels, ops):
    eps = pred.dtype.type(_PROB_EPS)
    one = pred.dtype.type(1)
    g = -(labels / np.maximum(pred, eps) - (one - labels) / np.maximum(one - pred, eps))
    return (g / pred.size).astype(pred.dtype)


def _cce_fwd(pred, labels, ops):
    eps = pred.dtype.type(_PROB_EPS)
    per = -ops.sum(labels * np.log(np.maximum(pred, eps)), axis=-1)
    return ops.mean(per)


def _cce_grad(pred, labels, ops):
    eps = pred.dtype.type(_PROB_EPS)
    lead = pred.size // pred.shape[-1]
    return (-labels / np.maximum(pred, eps) / lead).astype(pred.dtype)


def _hinge_parts(pred, labels):
    pos = np.sum(labels * pred, axis=-1)
    masked = (1.0 - labels) * pred
    neg = np.max(masked, axis=-1)
    return pos, masked, neg


def _hinge_fwd(pred, labels, ops):
    pos, _, neg = _hinge_parts(pred, labels)
    return ops.mean(np.maximum(neg - pos + pred.dtype.type(1), 0))


def _hinge_grad_impl(pred, labels, divide_by_ties: bool):
    pos, masked, neg = _hinge_parts(pred, labels)
    active = (neg - pos + 1.0) > 0
    ties = masked == neg[..., None]
    k = np.sum(ties, axis=-1, keepdims=True)
    dneg = ties * (1.0 - labels)
    if divide_by_ties:
        dneg = dneg / np.maximum(k, 1)
    lead = pred.size // pred.shape[-1]
    g = (dneg - labels) * active[..., None] / lead
    return g.astype(pred.dtype)


def _hinge_grad(pred, labels, ops):
    return _hinge_grad_impl(pred, labels, divide_by_ties=True)


LOSS_KERNELS: dict[str, LossKernel] = {
    "mean_squared_error": LossKernel(_mse_fwd, _mse_grad),
    "mean_absolute_percentage_error": LossKernel(_mape_fwd, _mape_grad),
    "binary_crossentropy": LossKernel(_bce_fwd, _bce_grad),
    "categorical_crossentropy": LossKernel(_cce_fwd, _cce_grad),
    "categorical_hinge": LossKernel(_hinge_fwd, _hinge_grad),
}
