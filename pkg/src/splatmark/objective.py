"""Loss terms: scaffold reconstruction, HSV color-mask loss, high-frequency
SSIM loss, and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import transforms as tf
from .gradcore import Tensor


@dataclass
class LossWeights:
    img: float = 10.0
    hsv: float = 0.6
    freq: float = 0.1
    msg: float = 0.45
    ssim: float = 0.2
    vol: float = 0.001

    def __post_init__(self):
        for name in ("img", "hsv", "freq", "msg", "ssim", "vol"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


# hue sector per color, degrees; red wraps around zero
DEFAULT_COLOR_RANGES: dict[str, tuple[float, float]] = {
    "red": (330.0, 30.0),
    "yellow": (30.0, 90.0),
    "green": (90.0, 150.0),
    "cyan": (150.0, 210.0),
    "blue": (210.0, 270.0),
    "magenta": (270.0, 330.0),
}


@dataclass
class HsvLossConfig:
    color_ranges: dict = field(default_factory=lambda: dict(DEFAULT_COLOR_RANGES))
    s_min: float = 0.2
    v_min: float = 0.2


def color_masks(gt: np.ndarray, cfg: HsvLossConfig) -> dict[str, np.ndarray]:
    """Binary per-color masks from the ground-truth image (gradient-stopped)."""
    hsv = tf.rgb_to_hsv(gt)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    valid = (s > cfg.s_min) & (v > cfg.v_min)
    masks = {}
    for color, (lo, hi) in cfg.color_ranges.items():
        in_range = ((h >= lo) | (h < hi)) if lo > hi else ((h >= lo) & (h < hi))
        masks[color] = in_range & valid
    return masks


def hsv_loss(rendered, gt: np.ndarray, cfg: HsvLossConfig | None = None, masks=None) -> Tensor:
    """Mean over present colors of masked RGB mean-squared error.

    Colors whose mask is empty are excluded from the average entirely.
    """
    cfg = cfg or HsvLossConfig()
    r = rendered if isinstance(rendered, Tensor) else Tensor(rendered)
    if masks is None:
        masks = color_masks(gt, cfg)
    flat_r = gc.reshape(r, (-1, 3))
    flat_gt = gt.reshape(-1, 3)
    terms = []
    for color in cfg.color_ranges:
        idx = np.flatnonzero(masks[color].reshape(-1))
        if idx.size == 0:
            continue
        diff = gc.gather_rows(flat_r, idx) - flat_gt[idx]
        terms.append(gc.sum_(gc.square(diff)) / float(idx.size))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def scaffold_loss(rendered, gt: np.ndarray, scales, weights: LossWeights | None = None):
    """L1 + weighted (1 - SSIM) + volume regularization over gaussian scales.

    Returns (loss, parts) with plain-float parts for logging.
    """
    w = weights or LossWeights()
    r = rendered if isinstance(rendered, Tensor) else Tensor(rendered)
    l1 = gc.mean(gc.abs_(r - gt))
    ssim_term = 1.0 - gc.mean(tf.ssim_map(r, Tensor(gt)))
    if isinstance(scales, Tensor) and scales.size:
        s = scales
        vol = gc.sum_(
            gc.slice_(s, (slice(None), 0))
            * gc.slice_(s, (slice(None), 1))
            * gc.slice_(s, (slice(None), 2))
        )
    else:
        vol = Tensor(0.0)
    loss = l1 + ssim_term * w.ssim + vol * w.vol
    parts = {"l1": l1.item(), "ssim": ssim_term.item(), "vol": vol.item()}
    return loss, parts


def freq_loss(rendered, gt: np.ndarray, hp=None, gt_hf=None) -> Tensor:
    """Mean pixel-wise SSIM error between high-pass filtered luminances."""
    r = rendered if isinstance(rendered, Tensor) else Tensor(rendered)
    H, W = r.shape[0], r.shape[1]
    if hp is None:
        hp = tf.gaussian_highpass(H, W)
    r_hf = tf.highpass_filter(tf.luminance(r), hp)
    if gt_hf is None:
        with gc.no_grad():
            gt_hf = tf.highpass_filter(tf.luminance(Tensor(gt)), hp).data
    p_err = 1.0 - tf.ssim_map(r_hf, Tensor(gt_hf))
    return gc.mean(p_err)


def total_loss(
    scaffold,
    hsv,
    freq,
    msg,
    weights: LossWeights | None = None,
    msg_active: bool = True,
) -> Tensor:
    """Weighted combination; the message term is dropped before activation."""
    w = weights or LossWeights()
    img_part = scaffold + hsv * w.hsv + freq * w.freq
    total = img_part * w.img
    if msg_active and msg is not None:
        total = total + msg * w.msg
    return total
