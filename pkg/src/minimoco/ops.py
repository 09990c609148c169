"""Differentiable primitives over Grids.

Each primitive is a pair of pure functions: ``forward(inputs, attrs)`` returns
the output array plus whatever the backward pass needs, and
``backward(grad, saved, attrs, needed)`` returns one cotangent per input
(``None`` for inputs that do not receive gradient; ``needed[i]`` says whether
input ``i``'s cotangent will be consumed, so expensive ones can be skipped).
Applying a primitive through the functional wrappers records a node on the
tape of any tracked operand.

Elementwise/GEMM work is plain numpy; the convolution lowering and the fused
batch-norm/relu paths call the compiled kernels in ``_kernels``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import _kernels as K
from .grid import Grid, NonFiniteError, ShapeError, as_grid, finite_checks_enabled

__all__ = [
    "PRIMITIVES",
    "primitive_forward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "relu", "add_relu",
    "matmul", "conv2d", "avg_pool2d", "global_avg_pool",
    "reduce_sum", "reduce_mean", "reduce_max",
    "reshape", "transpose", "concat", "crop2d",
    "l2_normalize", "bilinear_resize", "standardize", "batch_norm2d", "bn_affine2d",
    "logsumexp", "resize_matrix",
]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[[tuple, dict | None], tuple]
    backward: Callable[[np.ndarray, Any, dict | None, tuple], tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, backward):
    PRIMITIVES[name] = Primitive(name, forward, backward)


def _apply(name: str, inputs: Sequence[Grid], attrs: dict | None = None) -> Grid:
    datas = tuple(g.data for g in inputs)
    out, saved = PRIMITIVES[name].forward(datas, attrs)
    if finite_checks_enabled() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive {name} produced non-finite values")
    tape = None
    for g in inputs:
        if g.tape is not None:
            if tape is not None and tape is not g.tape:
                raise ShapeError(f"primitive {name}: operands live on different tapes")
            tape = g.tape
    if tape is None:
        return Grid(out)
    parents = tuple(g.nid if g.tape is tape else None for g in inputs)
    consts = tuple(None if g.tape is tape else g.data for g in inputs)
    nid = tape.add(name, parents, consts, attrs, saved, out)
    return Grid(out, tape=tape, nid=nid)


def primitive_forward(op: str, inputs: Sequence[Grid], attrs: dict | None = None) -> Grid:
    """Dispatch a primitive by name (tape-recorded when inputs are tracked)."""
    if op not in PRIMITIVES:
        raise ShapeError(f"unknown primitive {op!r}")
    return _apply(op, [as_grid(x) for x in inputs], attrs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# element-wise arithmetic

def _fw_add(inputs, attrs):
    a, b = inputs
    return a + b, (a.shape, b.shape)


def _bw_add(g, saved, attrs, needed):
    sa, sb = saved
    return (_unbroadcast(g, sa) if needed[0] else None,
            _unbroadcast(g, sb) if needed[1] else None)


def _fw_sub(inputs, attrs):
    a, b = inputs
    return a - b, (a.shape, b.shape)


def _bw_sub(g, saved, attrs, needed):
    sa, sb = saved
    return (_unbroadcast(g, sa) if needed[0] else None,
            _unbroadcast(-g, sb) if needed[1] else None)


def _fw_mul(inputs, attrs):
    a, b = inputs
    return a * b, (a, b)


def _bw_mul(g, saved, attrs, needed):
    a, b = saved
    return (_unbroadcast(g * b, a.shape) if needed[0] else None,
            _unbroadcast(g * a, b.shape) if needed[1] else None)


def _fw_div(inputs, attrs):
    a, b = inputs
    return a / b, (a, b)


def _bw_div(g, saved, attrs, needed):
    a, b = saved
    return (_unbroadcast(g / b, a.shape) if needed[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if needed[1] else None)


def _fw_neg(inputs, attrs):
    return -inputs[0], None


def _fw_exp(inputs, attrs):
    out = np.exp(inputs[0])
    return out, out


def _fw_log(inputs, attrs):
    return np.log(inputs[0]), inputs[0]


def _fw_sqrt(inputs, attrs):
    out = np.sqrt(inputs[0])
    return out, out


def _fw_relu(inputs, attrs):
    out, mask = K.relu_forward(np.ascontiguousarray(inputs[0]))
    return out, mask  # subgradient at 0 is 0


def _fw_add_relu(inputs, attrs):
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError(f"add_relu: shapes differ, {a.shape} vs {b.shape}")
    out, mask = K.add_relu_forward(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return out, mask


def _bw_add_relu(g, saved, attrs, needed):
    gm = K.mask_mul(np.ascontiguousarray(g), saved)
    return (gm if needed[0] else None, gm if needed[1] else None)


_register("add", _fw_add, _bw_add)
_register("sub", _fw_sub, _bw_sub)
_register("mul", _fw_mul, _bw_mul)
_register("div", _fw_div, _bw_div)
_register("neg", _fw_neg, lambda g, s, a, n: (-g,))
_register("exp", _fw_exp, lambda g, s, a, n: (g * s,))
_register("log", _fw_log, lambda g, s, a, n: (g / s,))
_register("sqrt", _fw_sqrt, lambda g, s, a, n: (g / (2.0 * s),))
_register("relu", _fw_relu, lambda g, s, a, n: (K.mask_mul(np.ascontiguousarray(g), s),))
_register("add_relu", _fw_add_relu, _bw_add_relu)


# ---------------------------------------------------------------------------
# matmul (supports stacked batches via numpy broadcasting)

def _fw_matmul(inputs, attrs):
    a, b = inputs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return np.matmul(a, b), (a, b)


def _bw_matmul(g, saved, attrs, needed):
    a, b = saved
    da = db = None
    if needed[0]:
        da = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needed[1]:
        db = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return da, db


_register("matmul", _fw_matmul, _bw_matmul)


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW)

def _conv_out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _fw_conv2d(inputs, attrs):
    x, w = inputs
    stride = attrs["stride"]
    pad = attrs["pad"]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape}, {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} (pad={pad})")
    if kh == 1 and kw == 1 and pad == 0:
        sliced = x[:, :, ::stride, ::stride] if stride > 1 else x
        cols = np.ascontiguousarray(sliced).reshape(b, cin, oh * ow)
    else:
        cols = K.im2col_pad(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)
    w2 = w.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(b, cout, oh, ow)
    return out, (cols, w, x.shape)


def _bw_conv2d(g, saved, attrs, needed):
    cols, w, x_shape = saved
    stride = attrs["stride"]
    pad = attrs["pad"]
    b, cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    g2 = np.ascontiguousarray(g).reshape(b, cout, oh * ow)
    dx = dw = None
    if needed[1]:
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if needed[0]:
        w2 = w.reshape(cout, cin * kh * kw)
        dcols = np.matmul(w2.T, g2)
        if kh == 1 and kw == 1 and pad == 0:
            if stride == 1:
                dx = dcols.reshape(x_shape)
            else:
                dx = np.zeros(x_shape, dtype=g.dtype)
                dx[:, :, ::stride, ::stride] = dcols.reshape(b, cin, oh, ow)
        else:
            dx = K.col2im_pad(dcols, b, cin, h, wd, kh, kw, stride, pad, oh, ow)
    return dx, dw


_register("conv2d", _fw_conv2d, _bw_conv2d)


# ---------------------------------------------------------------------------
# pooling

def _fw_avg_pool2d(inputs, attrs):
    x = inputs[0]
    ph, pw = attrs["window"]
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if ph < 1 or pw < 1 or h % ph or w % pw:
        raise ShapeError(f"avg_pool2d: window {ph}x{pw} does not tile input {h}x{w}")
    out = x.reshape(b, c, h // ph, ph, w // pw, pw).mean(axis=(3, 5))
    return out, x.shape


def _bw_avg_pool2d(g, saved, attrs, needed):
    ph, pw = attrs["window"]
    b, c, h, w = saved
    g = g / (ph * pw)
    gx = np.broadcast_to(
        g[:, :, :, None, :, None], (b, c, h // ph, ph, w // pw, pw)
    ).reshape(b, c, h, w)
    return (np.ascontiguousarray(gx),)


def _fw_gap(inputs, attrs):
    x = inputs[0]
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def _bw_gap(g, saved, attrs, needed):
    b, c, h, w = saved
    gx = np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w))
    return (np.ascontiguousarray(gx),)


_register("avg_pool2d", _fw_avg_pool2d, _bw_avg_pool2d)
_register("global_avg_pool", _fw_gap, _bw_gap)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _fw_reduce_sum(inputs, attrs):
    x = inputs[0]
    axes = _norm_axes(attrs["axes"], x.ndim)
    return x.sum(axis=axes, keepdims=attrs["keepdims"]), x.shape


def _bw_reduce_sum(g, saved, attrs, needed):
    shape = saved
    axes = _norm_axes(attrs["axes"], len(shape))
    if not attrs["keepdims"]:
        g = g.reshape(_keepdims_shape(shape, axes))
    return (np.ascontiguousarray(np.broadcast_to(g, shape)),)


def _fw_reduce_mean(inputs, attrs):
    x = inputs[0]
    axes = _norm_axes(attrs["axes"], x.ndim)
    return x.mean(axis=axes, keepdims=attrs["keepdims"]), x.shape


def _bw_reduce_mean(g, saved, attrs, needed):
    shape = saved
    axes = _norm_axes(attrs["axes"], len(shape))
    count = 1
    for a in axes:
        count *= shape[a]
    if not attrs["keepdims"]:
        g = g.reshape(_keepdims_shape(shape, axes))
    return (np.ascontiguousarray(np.broadcast_to(g / count, shape)),)


def _fw_reduce_max(inputs, attrs):
    x = inputs[0]
    axes = _norm_axes(attrs["axes"], x.ndim)
    out = x.max(axis=axes, keepdims=True)
    mask = (x == out)
    mask = mask / mask.sum(axis=axes, keepdims=True)  # split ties evenly
    if not attrs["keepdims"]:
        out = out.reshape(tuple(s for i, s in enumerate(x.shape) if i not in axes))
    return out, (mask, x.shape)


def _bw_reduce_max(g, saved, attrs, needed):
    mask, shape = saved
    axes = _norm_axes(attrs["axes"], len(shape))
    if not attrs["keepdims"]:
        g = g.reshape(_keepdims_shape(shape, axes))
    return (mask * g,)


_register("reduce_sum", _fw_reduce_sum, _bw_reduce_sum)
_register("reduce_mean", _fw_reduce_mean, _bw_reduce_mean)
_register("reduce_max", _fw_reduce_max, _bw_reduce_max)


# ---------------------------------------------------------------------------
# shape manipulation

def _contig(arr):
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


def _fw_reshape(inputs, attrs):
    x = inputs[0]
    return _contig(x).reshape(attrs["shape"]), x.shape


def _fw_transpose(inputs, attrs):
    return np.ascontiguousarray(inputs[0].transpose(attrs["perm"])), None


def _bw_transpose(g, saved, attrs, needed):
    perm = attrs["perm"]
    inv = tuple(np.argsort(perm))
    return (np.ascontiguousarray(g.transpose(inv)),)


def _fw_concat(inputs, attrs):
    axis = attrs["axis"]
    return np.concatenate(inputs, axis=axis), tuple(x.shape[axis] for x in inputs)


def _bw_concat(g, saved, attrs, needed):
    axis = attrs["axis"]
    sizes = saved
    splits = np.cumsum(sizes[:-1])
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


def _fw_crop2d(inputs, attrs):
    x = inputs[0]
    h0, ch, w0, cw = attrs["box"]
    if x.ndim != 4 or h0 + ch > x.shape[2] or w0 + cw > x.shape[3]:
        raise ShapeError(f"crop2d: box {attrs['box']} out of range for {x.shape}")
    return np.ascontiguousarray(x[:, :, h0 : h0 + ch, w0 : w0 + cw]), x.shape


def _bw_crop2d(g, saved, attrs, needed):
    h0, ch, w0, cw = attrs["box"]
    dx = np.zeros(saved, dtype=g.dtype)
    dx[:, :, h0 : h0 + ch, w0 : w0 + cw] = g
    return (dx,)


_register("reshape", _fw_reshape, lambda g, s, a, n: (g.reshape(s),))
_register("transpose", _fw_transpose, _bw_transpose)
_register("concat", _fw_concat, _bw_concat)
_register("crop2d", _fw_crop2d, _bw_crop2d)


# ---------------------------------------------------------------------------
# normalization

def _fw_l2_normalize(inputs, attrs):
    x = inputs[0]
    axis = attrs["axis"]
    eps = attrs["eps"]
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    out = x / (norm + eps)
    return out, (x, norm)


def _bw_l2_normalize(g, saved, attrs, needed):
    x, norm = saved
    axis = attrs["axis"]
    eps = attrs["eps"]
    dot = (g * x).sum(axis=axis, keepdims=True)
    denom = (norm + eps) ** 2 * np.maximum(norm, np.finfo(x.dtype).tiny)
    return (g / (norm + eps) - x * (dot / denom),)


def _fw_standardize(inputs, attrs):
    x = inputs[0]
    axes = _norm_axes(attrs["axes"], x.ndim)
    eps = attrs["eps"]
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat, (xhat, inv, mu, var)


def _bw_standardize(g, saved, attrs, needed):
    xhat, inv, _, _ = saved
    axes = _norm_axes(attrs["axes"], xhat.ndim)
    gm = g.mean(axis=axes, keepdims=True)
    gx = (g * xhat).mean(axis=axes, keepdims=True)
    return (inv * (g - gm - xhat * gx),)


def _fw_batch_norm2d(inputs, attrs):
    x = inputs[0]
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: expected [B,C,H,W], got {x.shape}")
    xhat, inv, mu, var = K.bn2d_forward(np.ascontiguousarray(x), attrs["eps"])
    return xhat, (xhat, inv, mu, var)


def _bw_batch_norm2d(g, saved, attrs, needed):
    xhat, inv, _, _ = saved
    return (K.bn2d_backward(np.ascontiguousarray(g), xhat, inv),)


def _fw_bn_affine2d(inputs, attrs):
    x, gamma, beta = inputs
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"bn_affine2d: expected x [B,C,H,W] with per-channel gamma/beta, "
            f"got {x.shape}, {gamma.shape}, {beta.shape}"
        )
    gamma = gamma.astype(x.dtype, copy=False)
    beta = beta.astype(x.dtype, copy=False)
    out, xhat, inv, mu, var = K.bn2d_affine_forward(
        np.ascontiguousarray(x), gamma, beta, attrs["eps"]
    )
    return out, (xhat, inv, mu, var, gamma)


def _bw_bn_affine2d(g, saved, attrs, needed):
    xhat, inv, _, _, gamma = saved
    dx, dgamma, dbeta = K.bn2d_affine_backward(np.ascontiguousarray(g), xhat, inv, gamma)
    return (dx if needed[0] else None, dgamma, dbeta)


_register("l2_normalize", _fw_l2_normalize, _bw_l2_normalize)
_register("standardize", _fw_standardize, _bw_standardize)
_register("batch_norm2d", _fw_batch_norm2d, _bw_batch_norm2d)
_register("bn_affine2d", _fw_bn_affine2d, _bw_bn_affine2d)


# ---------------------------------------------------------------------------
# bilinear resize (align-corners=false): expressed as two interpolation
# matrices so forward and backward are plain matmuls

def resize_matrix(in_len: int, out_len: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic matrix R with (R @ signal) the bilinear resample."""
    r = np.zeros((out_len, in_len), dtype=dtype)
    if in_len == 1:
        r[:, 0] = 1.0
        return r
    scale = in_len / out_len
    pos = (np.arange(out_len) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, in_len - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_len - 1)
    w = (pos - lo).astype(dtype)
    r[np.arange(out_len), lo] += 1.0 - w
    r[np.arange(out_len), hi] += w
    return r


def _fw_bilinear(inputs, attrs):
    x = inputs[0]
    oh, ow = attrs["out_hw"]
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected 4-D input, got {x.shape}")
    ry = resize_matrix(x.shape[2], oh, x.dtype)
    rx = resize_matrix(x.shape[3], ow, x.dtype)
    out = np.matmul(np.matmul(ry, x), rx.T)
    return out, (ry, rx)


def _bw_bilinear(g, saved, attrs, needed):
    ry, rx = saved
    return (np.matmul(np.matmul(ry.T, g), rx),)


_register("bilinear_resize", _fw_bilinear, _bw_bilinear)


# ---------------------------------------------------------------------------
# functional wrappers

def add(a, b):
    a = as_grid(a) if isinstance(a, Grid) else as_grid(a, like=b)
    return _apply("add", (a, as_grid(b, like=a)))


def sub(a, b):
    a = as_grid(a) if isinstance(a, Grid) else as_grid(a, like=b)
    return _apply("sub", (a, as_grid(b, like=a)))


def mul(a, b):
    a = as_grid(a) if isinstance(a, Grid) else as_grid(a, like=b)
    return _apply("mul", (a, as_grid(b, like=a)))


def div(a, b):
    a = as_grid(a) if isinstance(a, Grid) else as_grid(a, like=b)
    return _apply("div", (a, as_grid(b, like=a)))


def neg(a):
    return _apply("neg", (as_grid(a),))


def exp(a):
    return _apply("exp", (as_grid(a),))


def log(a):
    return _apply("log", (as_grid(a),))


def sqrt(a):
    return _apply("sqrt", (as_grid(a),))


def relu(a):
    return _apply("relu", (as_grid(a),))


def add_relu(a, b):
    return _apply("add_relu", (as_grid(a), as_grid(b)))


def matmul(a, b):
    return _apply("matmul", (as_grid(a), as_grid(b)))


def conv2d(x, w, stride: int = 1, pad: int = 0):
    return _apply("conv2d", (as_grid(x), as_grid(w)), {"stride": stride, "pad": pad})


def avg_pool2d(x, window):
    return _apply("avg_pool2d", (as_grid(x),), {"window": tuple(window)})


def global_avg_pool(x):
    return _apply("global_avg_pool", (as_grid(x),))


def reduce_sum(x, axes=None, keepdims=False):
    return _apply("reduce_sum", (as_grid(x),), {"axes": axes, "keepdims": keepdims})


def reduce_mean(x, axes=None, keepdims=False):
    return _apply("reduce_mean", (as_grid(x),), {"axes": axes, "keepdims": keepdims})


def reduce_max(x, axes=None, keepdims=False):
    return _apply("reduce_max", (as_grid(x),), {"axes": axes, "keepdims": keepdims})


def reshape(x, shape):
    return _apply("reshape", (as_grid(x),), {"shape": tuple(shape)})


def transpose(x, perm):
    return _apply("transpose", (as_grid(x),), {"perm": tuple(perm)})


def concat(grids, axis=0):
    return _apply("concat", tuple(as_grid(g) for g in grids), {"axis": axis})


def crop2d(x, h0, ch, w0, cw):
    return _apply("crop2d", (as_grid(x),), {"box": (h0, ch, w0, cw)})


def l2_normalize(x, axis=-1, eps=1e-12):
    return _apply("l2_normalize", (as_grid(x),), {"axis": axis, "eps": eps})


def bilinear_resize(x, out_hw):
    return _apply("bilinear_resize", (as_grid(x),), {"out_hw": tuple(out_hw)})


def standardize(x, axes, eps=1e-5):
    return _apply("standardize", (as_grid(x),), {"axes": axes, "eps": eps})


def batch_norm2d(x, eps=1e-5):
    return _apply("batch_norm2d", (as_grid(x),), {"eps": eps})


def bn_affine2d(x, gamma, beta, eps=1e-5):
    return _apply("bn_affine2d", (as_grid(x), as_grid(gamma), as_grid(beta)), {"eps": eps})


def logsumexp(x, axis=-1, keepdims=False):
    """Numerically stable log-sum-exp; the max shift is treated as constant."""
    m = reduce_max(x, axes=axis, keepdims=True).detach()
    shifted = log(reduce_sum(exp(sub(x, m)), axes=axis, keepdims=True))
    out = add(shifted, m)
    if keepdims:
        return out
    g = as_grid(out)
    axes = _norm_axes(axis, g.data.ndim)
    new_shape = tuple(s for i, s in enumerate(g.data.shape) if i not in axes)
    return reshape(out, new_shape)


# operator sugar on Grid
Grid.__add__ = lambda self, other: add(self, other)
Grid.__radd__ = lambda self, other: add(other, self)
Grid.__sub__ = lambda self, other: sub(self, other)
Grid.__rsub__ = lambda self, other: sub(other, self)
Grid.__mul__ = lambda self, other: mul(self, other)
Grid.__rmul__ = lambda self, other: mul(other, self)
Grid.__truediv__ = lambda self, other: div(self, other)
Grid.__rtruediv__ = lambda self, other: div(other, self)
Grid.__neg__ = lambda self: neg(self)
Grid.__matmul__ = lambda self, other: matmul(self, other)
