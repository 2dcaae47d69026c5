"""Deterministic image-domain transforms: one-level Haar DWT, Gaussian
high-pass filtering in the Fourier domain, pixel-wise SSIM maps, RGB<->HSV.

All transform paths that feed losses are differentiable tape ops; the HSV
conversions are plain numpy (they only ever produce gradient-stopped masks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor


# ---------------------------------------------------------------------------
# one-level orthonormal Haar DWT


@dataclass
class DwtSubbands:
    """Quarter-resolution subbands; orthonormal, so idwt(dwt(x)) == x."""

    LL: Tensor
    LH: Tensor
    HL: Tensor
    HH: Tensor
    orig_h: int
    orig_w: int
    padded: bool = False


def _spatial(t, rsl, csl):
    return gc.slice_(t, (Ellipsis, rsl, csl, slice(None)))


def haar_dwt(image) -> DwtSubbands:
    """Analysis on the last three axes (..., H, W, C); odd dims reflect-pad."""
    t = image if isinstance(image, Tensor) else Tensor(image)
    H, W = t.shape[-3], t.shape[-2]
    padded = False
    if H % 2 or W % 2:
        if t.ndim != 3:
            raise ValueError("odd-size padding supported for (H,W,C) images only")
        t = gc.reflect_pad2d(t, 1)
        t = gc.slice_(t, (slice(1, 1 + H + H % 2), slice(1, 1 + W + W % 2), slice(None)))
        padded = True
    e, o = slice(0, None, 2), slice(1, None, 2)
    a = _spatial(t, e, e)
    b = _spatial(t, e, o)
    c = _spatial(t, o, e)
    d = _spatial(t, o, o)
    LL = (a + b + c + d) * 0.5
    LH = (a - b + c - d) * 0.5
    HL = (a + b - c - d) * 0.5
    HH = (a - b - c + d) * 0.5
    return DwtSubbands(LL, LH, HL, HH, H, W, padded)


def haar_idwt(sb: DwtSubbands) -> Tensor:
    """Synthesis; crops away any analysis padding."""
    a = (sb.LL + sb.LH + sb.HL + sb.HH) * 0.5
    b = (sb.LL - sb.LH + sb.HL - sb.HH) * 0.5
    c = (sb.LL + sb.LH - sb.HL - sb.HH) * 0.5
    d = (sb.LL - sb.LH - sb.HL + sb.HH) * 0.5
    h2, w2 = a.shape[-3], a.shape[-2]
    out_shape = a.shape[:-3] + (2 * h2, 2 * w2) + a.shape[-1:]

    def fwd(aa, bb, cc, dd):
        out = np.zeros(out_shape)
        out[..., 0::2, 0::2, :] = aa
        out[..., 0::2, 1::2, :] = bb
        out[..., 1::2, 0::2, :] = cc
        out[..., 1::2, 1::2, :] = dd
        return out

    def bwd(g):
        return (
            g[..., 0::2, 0::2, :],
            g[..., 0::2, 1::2, :],
            g[..., 1::2, 0::2, :],
            g[..., 1::2, 1::2, :],
        )

    full = gc.record("interleave", (a, b, c, d), fwd(a.data, b.data, c.data, d.data), bwd)
    if sb.padded:
        full = gc.slice_(full, (slice(0, sb.orig_h), slice(0, sb.orig_w), slice(None)))
    return full


# ---------------------------------------------------------------------------
# Gaussian high-pass mask and FFT filtering


@dataclass
class HighPassMask:
    mask: np.ndarray  # H x W, 0 inside the cutoff disk
    tau: float
    beta: float


def default_cutoff(H: int, W: int) -> float:
    return 0.125 * float(np.hypot(H, W))


def default_attenuation(H: int, W: int) -> float:
    return (0.05 * float(np.hypot(H, W))) ** 2


def gaussian_highpass(H: int, W: int, tau: float | None = None, beta: float | None = None) -> HighPassMask:
    """Radial mask 1 - exp(-(d - tau)^2 / (2 beta)) for d >= tau, else 0.

    d is the Euclidean distance to the spectrum center (DC after shifting).
    """
    if tau is None:
        tau = default_cutoff(H, W)
    if beta is None:
        beta = default_attenuation(H, W)
    if beta <= 0 or tau < 0:
        raise ValueError(f"gaussian_highpass: need beta > 0 and tau >= 0, got {tau}, {beta}")
    r = np.arange(H)[:, None] - H // 2
    c = np.arange(W)[None, :] - W // 2
    d = np.hypot(r, c)
    mask = np.where(d >= tau, 1.0 - np.exp(-((d - tau) ** 2) / (2.0 * beta)), 0.0)
    return HighPassMask(mask, float(tau), float(beta))


def highpass_filter(image, hp: HighPassMask) -> Tensor:
    """Keep only spectral content passed by the mask; real output, linear op.

    The mask is symmetric under frequency negation, so the op is self-adjoint.
    """
    t = image if isinstance(image, Tensor) else Tensor(image)
    if t.ndim == 3:
        if t.shape[-1] != 1:
            raise ValueError("highpass_filter expects single-channel input")
        t = gc.reshape(t, t.shape[:2])
    H, W = t.shape
    if hp.mask.shape != (H, W):
        raise ValueError(f"mask shape {hp.mask.shape} does not match image {(H, W)}")
    m = np.fft.ifftshift(hp.mask)

    def apply(x):
        return np.real(np.fft.ifft2(np.fft.fft2(x) * m))

    return gc.record("highpass", (t,), apply(t.data), lambda g: (apply(g),))


def luminance(image) -> Tensor:
    """Rec.601 luma of an (H,W,3) tensor."""
    t = image if isinstance(image, Tensor) else Tensor(image)
    r = gc.slice_(t, (Ellipsis, 0))
    g = gc.slice_(t, (Ellipsis, 1))
    b = gc.slice_(t, (Ellipsis, 2))
    return r * 0.299 + g * 0.587 + b * 0.114


# ---------------------------------------------------------------------------
# SSIM


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def ssim_map(a, b) -> Tensor:
    """Per-pixel SSIM, averaged over channels; window 11, sigma 1.5.

    Same-size output via reflect padding; values in [-1, 1], exactly 1 where
    the inputs agree.
    """
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"ssim_map: shapes {ta.shape} != {tb.shape}")
    squeeze = ta.ndim == 2
    if squeeze:
        ta = gc.reshape(ta, ta.shape + (1,))
        tb = gc.reshape(tb, tb.shape + (1,))
    k = ssim_window()
    blur = lambda t: gc.gaussian_filter_same(t, k)
    mu_a = blur(ta)
    mu_b = blur(tb)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = blur(ta * ta) - mu_aa
    var_b = blur(tb * tb) - mu_bb
    cov = blur(ta * tb) - mu_ab
    num = (mu_ab * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    out = num / den
    return gc.mean(out, axis=-1)


# ---------------------------------------------------------------------------
# RGB <-> HSV (mask machinery only; no gradients flow through these)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """(H,W,3) in [0,1] -> hue [0,360), saturation [0,1], value [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=-1)
    c = v - img.min(axis=-1)
    s = np.where(v > 0, c / np.maximum(v, 1e-12), 0.0)
    h = np.zeros_like(v)
    nz = c > 0
    rmax = nz & (v == r)
    gmax = nz & (v == g) & ~rmax
    bmax = nz & (v == b) & ~rmax & ~gmax
    cc = np.where(nz, c, 1.0)
    h[rmax] = (60.0 * ((g - b) / cc))[rmax] % 360.0
    h[gmax] = (60.0 * ((b - r) / cc) + 120.0)[gmax]
    h[bmax] = (60.0 * ((r - g) / cc) + 240.0)[bmax]
    return np.stack([h % 360.0, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    lut = [
        (c, x, z),
        (x, c, z),
        (z, c, x),
        (z, x, c),
        (x, z, c),
        (c, z, x),
    ]
    r = np.choose(sector, [t[0] for t in lut])
    g = np.choose(sector, [t[1] for t in lut])
    b = np.choose(sector, [t[2] for t in lut])
    m = v - c
    return np.stack([r + m, g + m, b + m], axis=-1)
