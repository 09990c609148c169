"""Compiled hot-path kernels (single-pass fusions of the numpy equivalents).

Everything here is a pure function over contiguous arrays; the math is
identical to the straightforward numpy formulation, just fused to one or two
memory passes.  All kernels are exercised against finite differences through
the primitive property tests.
"""

from __future__ import annotations

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=False)


@_jit
def _valid_range(k, stride, pad, n_in, n_out):
    """Output-index range [lo, hi) whose input index k + o*stride - pad is in bounds."""
    lo = 0
    shift = k - pad
    if shift < 0:
        lo = (-shift + stride - 1) // stride
    hi = (n_in - shift + stride - 1) // stride
    if hi > n_out:
        hi = n_out
    if lo > hi:
        lo = hi
    return lo, hi


@_jit
def im2col_pad(x, kh, kw, stride, pad, oh, ow):
    b, c, h, w = x.shape
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for ky in range(kh):
                oy_lo, oy_hi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    ox_lo, ox_hi = _valid_range(kx, stride, pad, w, ow)
                    row = (ci * kh + ky) * kw + kx
                    for oy in range(0, oy_lo):
                        cols[bi, row, oy * ow : (oy + 1) * ow] = 0
                    for oy in range(oy_hi, oh):
                        cols[bi, row, oy * ow : (oy + 1) * ow] = 0
                    for oy in range(oy_lo, oy_hi):
                        iy = oy * stride + ky - pad
                        base = oy * ow
                        for ox in range(0, ox_lo):
                            cols[bi, row, base + ox] = 0
                        for ox in range(ox_hi, ow):
                            cols[bi, row, base + ox] = 0
                        ix = ox_lo * stride + kx - pad
                        for ox in range(ox_lo, ox_hi):
                            cols[bi, row, base + ox] = x[bi, ci, iy, ix]
                            ix += stride
    return cols


@_jit
def col2im_pad(dcols, b, c, h, w, kh, kw, stride, pad, oh, ow):
    dx = np.zeros((b, c, h, w), dtype=dcols.dtype)
    for bi in range(b):
        for ci in range(c):
            for ky in range(kh):
                oy_lo, oy_hi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    ox_lo, ox_hi = _valid_range(kx, stride, pad, w, ow)
                    row = (ci * kh + ky) * kw + kx
                    for oy in range(oy_lo, oy_hi):
                        iy = oy * stride + ky - pad
                        base = oy * ow
                        ix = ox_lo * stride + kx - pad
                        for ox in range(ox_lo, ox_hi):
                            dx[bi, ci, iy, ix] += dcols[bi, row, base + ox]
                            ix += stride
    return dx


@_jit
def bn2d_forward(x, eps):
    b, c, h, w = x.shape
    n = b * h * w
    mu = np.zeros(c, dtype=np.float64)
    sq = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            s = 0.0
            s2 = 0.0
            for y in range(h):
                for z in range(w):
                    v = x[bi, ci, y, z]
                    s += v
                    s2 += v * v
            mu[ci] += s
            sq[ci] += s2
    mu /= n
    var = sq / n - mu * mu
    for ci in range(c):
        if var[ci] < 0.0:
            var[ci] = 0.0
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    for bi in range(b):
        for ci in range(c):
            m = x.dtype.type(mu[ci])
            iv = x.dtype.type(inv[ci])
            for y in range(h):
                for z in range(w):
                    xhat[bi, ci, y, z] = (x[bi, ci, y, z] - m) * iv
    return xhat, inv, mu, var


@_jit
def bn2d_backward(g, xhat, inv):
    b, c, h, w = g.shape
    n = b * h * w
    gm = np.zeros(c, dtype=np.float64)
    gx = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            s0 = 0.0
            s1 = 0.0
            for y in range(h):
                for z in range(w):
                    gv = g[bi, ci, y, z]
                    s0 += gv
                    s1 += gv * xhat[bi, ci, y, z]
            gm[ci] += s0
            gx[ci] += s1
    gm /= n
    gx /= n
    dx = np.empty_like(g)
    for bi in range(b):
        for ci in range(c):
            m = g.dtype.type(gm[ci])
            xg = g.dtype.type(gx[ci])
            iv = g.dtype.type(inv[ci])
            for y in range(h):
                for z in range(w):
                    dx[bi, ci, y, z] = iv * (g[bi, ci, y, z] - m - xhat[bi, ci, y, z] * xg)
    return dx


@_jit
def bn2d_affine_forward(x, gamma, beta, eps):
    b, c, h, w = x.shape
    n = b * h * w
    mu = np.zeros(c, dtype=np.float64)
    sq = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            s = 0.0
            s2 = 0.0
            for y in range(h):
                for z in range(w):
                    v = x[bi, ci, y, z]
                    s += v
                    s2 += v * v
            mu[ci] += s
            sq[ci] += s2
    mu /= n
    var = sq / n - mu * mu
    for ci in range(c):
        if var[ci] < 0.0:
            var[ci] = 0.0
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for bi in range(b):
        for ci in range(c):
            m = x.dtype.type(mu[ci])
            iv = x.dtype.type(inv[ci])
            ga = gamma[ci]
            be = beta[ci]
            for y in range(h):
                for z in range(w):
                    xh = (x[bi, ci, y, z] - m) * iv
                    xhat[bi, ci, y, z] = xh
                    out[bi, ci, y, z] = xh * ga + be
    return out, xhat, inv, mu, var


@_jit
def bn2d_affine_backward(g, xhat, inv, gamma):
    b, c, h, w = g.shape
    n = b * h * w
    s0 = np.zeros(c, dtype=np.float64)
    s1 = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            a0 = 0.0
            a1 = 0.0
            for y in range(h):
                for z in range(w):
                    gv = g[bi, ci, y, z]
                    a0 += gv
                    a1 += gv * xhat[bi, ci, y, z]
            s0[ci] += a0
            s1[ci] += a1
    dgamma = s1.astype(g.dtype)
    dbeta = s0.astype(g.dtype)
    gm = s0 / n
    gx = s1 / n
    dx = np.empty_like(g)
    for bi in range(b):
        for ci in range(c):
            m = g.dtype.type(gm[ci])
            xg = g.dtype.type(gx[ci])
            scale = g.dtype.type(gamma[ci] * inv[ci])
            for y in range(h):
                for z in range(w):
                    dx[bi, ci, y, z] = scale * (g[bi, ci, y, z] - m - xhat[bi, ci, y, z] * xg)
    return dx, dgamma, dbeta


@_jit
def add_relu_forward(a, b):
    # out = v * (v > 0) rather than a select, so NaN propagates
    out = np.empty_like(a)
    mask = np.empty(a.shape, dtype=np.uint8)
    fa = a.reshape(-1)
    fb = b.reshape(-1)
    fo = out.reshape(-1)
    fm = mask.reshape(-1)
    for i in range(fa.size):
        v = fa[i] + fb[i]
        m = np.uint8(1) if v > 0 else np.uint8(0)
        fm[i] = m
        fo[i] = v * m
    return out, mask


@_jit
def relu_forward(x):
    out = np.empty_like(x)
    mask = np.empty(x.shape, dtype=np.uint8)
    fx = x.reshape(-1)
    fo = out.reshape(-1)
    fm = mask.reshape(-1)
    for i in range(fx.size):
        v = fx[i]
        m = np.uint8(1) if v > 0 else np.uint8(0)
        fm[i] = m
        fo[i] = v * m
    return out, mask


@_jit
def mask_mul(g, mask):
    out = np.empty_like(g)
    fg = g.reshape(-1)
    fm = mask.reshape(-1)
    fo = out.reshape(-1)
    for i in range(fg.size):
        fo[i] = fg[i] * fm[i]
    return out
