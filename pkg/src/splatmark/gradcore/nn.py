"""Structured ops: convolution, pooling, resampling, padding.

Image tensors are channels-last: (B, H, W, C) for batched ops, (H, W, C) for
the single-image helpers. Kernels are (kh, kw, C_in, C_out).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _wrap, record


def conv2d(x, w, stride: int = 1, pad: int = 0):
    """Cross-correlation of (B,H,W,Ci) with (kh,kw,Ci,Co), zero padding."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[3] != w.data.shape[2]:
        raise ValueError(f"conv2d: shapes {x.data.shape} and {w.data.shape} do not conform")
    B, H, W, Ci = x.data.shape
    kh, kw, _, Co = w.data.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    out = np.zeros((B, Ho, Wo, Co))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u : u + Ho * stride : stride, v : v + Wo * stride : stride, :]
            out += sl @ w.data[u, v]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, u : u + Ho * stride : stride, v : v + Wo * stride : stride, :]
                gw[u, v] = np.einsum("bijc,bijo->co", sl, g)
                gxp[:, u : u + Ho * stride : stride, v : v + Wo * stride : stride, :] += g @ w.data[u, v].T
        gx = gxp[:, pad : pad + H, pad : pad + W, :] if pad else gxp
        return (gx, gw)

    return record("conv2d", (x, w), out, bwd)


def avg_pool(x):
    """Global average pool (B,H,W,C) -> (B,C)."""
    x = _wrap(x)
    B, H, W, C = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def bwd(g):
        return (np.broadcast_to(g[:, None, None, :] / (H * W), x.data.shape).copy(),)

    return record("avg-pool", (x,), out, bwd)


def reflect_pad2d(x, r: int):
    """Reflect-pad the two leading spatial axes of (H,W,...) by r."""
    x = _wrap(x)
    H, W = x.data.shape[:2]
    idx_h = np.concatenate([np.arange(r, 0, -1), np.arange(H), np.arange(H - 2, H - 2 - r, -1)])
    idx_w = np.concatenate([np.arange(r, 0, -1), np.arange(W), np.arange(W - 2, W - 2 - r, -1)])
    out = x.data[idx_h][:, idx_w]

    def bwd(g):
        tmp = np.zeros((H,) + g.shape[1:])
        np.add.at(tmp, idx_h, g)
        full = np.zeros_like(x.data)
        np.add.at(np.swapaxes(full, 0, 1), idx_w, np.swapaxes(tmp, 0, 1))
        return (full,)

    return record("reflect-pad", (x,), out, bwd)


def sepconv_valid(x, k: np.ndarray):
    """Separable 'valid' filtering of (H,W,...) with a 1-D kernel on both axes."""
    x = _wrap(x)
    k = np.asarray(k, dtype=np.float64)
    n = k.size
    H, W = x.data.shape[:2]
    Ho, Wo = H - n + 1, W - n + 1

    def _filt(a, axis, out_len):
        acc = None
        for i in range(n):
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(i, i + out_len)
            term = k[i] * a[tuple(sl)]
            acc = term if acc is None else acc + term
        return acc

    out = _filt(_filt(x.data, 0, Ho), 1, Wo)

    def _adjoint(g, axis, in_len):
        shp = list(g.shape)
        shp[axis] = in_len
        acc = np.zeros(shp)
        for i in range(n):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(i, i + g.shape[axis])
            acc[tuple(sl)] += k[i] * g
        return acc

    def bwd(g):
        return (_adjoint(_adjoint(g, 1, W), 0, H),)

    return record("sepconv", (x,), out, bwd)


def gaussian_filter_same(x, kernel1d: np.ndarray):
    """Same-size separable filtering with reflect padding."""
    r = kernel1d.size // 2
    return sepconv_valid(reflect_pad2d(x, r), kernel1d)


def _bilinear_weights(n_out: int, n_in: int):
    """Align-corners-false bilinear sampling: indices and weights per output."""
    scale = n_in / n_out
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    lo0 = np.clip(lo, 0, n_in - 1)
    lo1 = np.clip(lo + 1, 0, n_in - 1)
    return lo0, lo1, frac


def bilinear_resize(x, out_h: int, out_w: int):
    """Bilinear resample of (H,W,...) to (out_h,out_w,...)."""
    x = _wrap(x)
    H, W = x.data.shape[:2]
    if (H, W) == (out_h, out_w):
        return record("resize", (x,), x.data.copy(), lambda g: (g,))
    r0, r1, fr = _bilinear_weights(out_h, H)
    c0, c1, fc = _bilinear_weights(out_w, W)
    trail = (1,) * (x.data.ndim - 2)
    fr_ = fr.reshape(-1, 1, *trail)
    fc_ = fc.reshape(1, -1, *trail)
    a = x.data[r0][:, c0]
    b = x.data[r0][:, c1]
    c = x.data[r1][:, c0]
    d = x.data[r1][:, c1]
    out = (
        a * (1 - fr_) * (1 - fc_)
        + b * (1 - fr_) * fc_
        + c * fr_ * (1 - fc_)
        + d * fr_ * fc_
    )

    def bwd(g):
        gx = np.zeros_like(x.data)
        for rows, wr in ((r0, 1 - fr_), (r1, fr_)):
            for cols, wc in ((c0, 1 - fc_), (c1, fc_)):
                contrib = g * wr * wc
                # two-stage scatter: columns first, then rows
                tmp = np.zeros((out_h, W) + x.data.shape[2:])
                np.add.at(np.swapaxes(tmp, 0, 1), cols, np.swapaxes(contrib, 0, 1))
                np.add.at(gx, rows, tmp)
        return (gx,)

    return record("resize", (x,), out, bwd)


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill=0.0) -> np.ndarray:
    """Non-differentiable bilinear lookup at continuous (y,x); out of range -> fill.

    Used by the attack suite; plain numpy in/out.
    """
    H, W = image.shape[:2]
    valid = (ys >= 0) & (ys <= H - 1) & (xs >= 0) & (xs <= W - 1)
    yc = np.clip(ys, 0, H - 1)
    xc = np.clip(xs, 0, W - 1)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (yc - y0)[..., None]
    fx = (xc - x0)[..., None]
    out = (
        image[y0, x0] * (1 - fy) * (1 - fx)
        + image[y0, x1] * (1 - fy) * fx
        + image[y1, x0] * fy * (1 - fx)
        + image[y1, x1] * fy * fx
    )
    out[~valid] = fill
    return out
