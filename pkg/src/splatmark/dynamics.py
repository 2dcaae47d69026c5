"""Anchor growing and pruning.

Conventional growing promotes neural Gaussians whose mean accumulated screen
gradient exceeds a threshold into new anchors at empty voxel centers; the
frequency-aware restriction intersects the candidate set with Gaussians that
project into pixels whose high-pass SSIM error sits in a band around the
median error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import transforms as tf
from .gradcore import Tensor
from .scene import AnchorSet
from .watermark import round_half_away


class PruneRejected(RuntimeError):
    """Pruning would have removed every anchor; nothing was changed."""


@dataclass
class GrowConfig:
    voxel_size: float
    stat_window: int = 100
    grad_threshold: float | None = None  # None: percentile rule per pass
    grad_percentile: float = 64.0
    prune_opacity_threshold: float = 0.02
    eps: float = 0.3  # half-width of the FAG error band
    fag_enabled: bool = True

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.grad_threshold is not None and self.grad_threshold <= 0:
            raise ValueError("grad_threshold must be > 0")


@dataclass
class FagSelection:
    highfreq_pixel_indices: np.ndarray  # sorted row*W+col hashes inside the band
    gaussian_mask: np.ndarray  # per rendered gaussian, True when in the band
    median_error: float
    in_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def pixel_hash(rows, cols, width: int):
    return np.asarray(rows, dtype=np.int64) * width + np.asarray(cols, dtype=np.int64)


def fag_select(rendered: np.ndarray, gt: np.ndarray, screen_means: np.ndarray, cfg: GrowConfig) -> FagSelection:
    """Select Gaussians projecting into the median band of high-pass SSIM error."""
    if rendered.shape != gt.shape:
        raise ValueError(f"fag_select: image shapes {rendered.shape} != {gt.shape}")
    H, W = rendered.shape[:2]
    hp = tf.gaussian_highpass(H, W)
    with gc.no_grad():
        r_hf = tf.highpass_filter(tf.luminance(Tensor(rendered)), hp)
        g_hf = tf.highpass_filter(tf.luminance(Tensor(gt)), hp)
        p_err = 1.0 - tf.ssim_map(g_hf, r_hf).data
    med = float(np.median(p_err))
    band = np.abs(p_err - med) <= cfg.eps
    rows, cols = np.nonzero(band)
    hashes = np.sort(pixel_hash(rows, cols, W))

    px = round_half_away(screen_means[:, 0] - 0.5).astype(np.int64)
    py = round_half_away(screen_means[:, 1] - 0.5).astype(np.int64)
    in_frame = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    g_hash = np.where(in_frame, py * W + px, -1)
    mask = np.zeros(screen_means.shape[0], dtype=bool)
    mask[in_frame] = np.isin(g_hash[in_frame], hashes)
    return FagSelection(hashes, mask, med, in_frame)


def _voxel_cells(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def grow_anchors(
    anchors: AnchorSet,
    cfg: GrowConfig,
    rng,
    selection: FagSelection | None = None,
    selection_parents: tuple[np.ndarray, np.ndarray] | None = None,
    f_prime: Tensor | None = None,
    optimizer: gc.Adam | None = None,
):
    """Create anchors at empty voxels seeded by high-gradient Gaussians.

    When a FAG selection is given, candidates are intersected with the
    Gaussians it marked (mapped back to anchor/offset slots via
    `selection_parents`). Returns (n_new, log_rows); statistics reset.
    """
    N, K = anchors.accumulated_grad.shape
    obs = np.maximum(anchors.observation_count, 1)[:, None]
    mean_grad = anchors.accumulated_grad / obs
    if cfg.grad_threshold is not None:
        tau = cfg.grad_threshold
    else:
        nz = mean_grad[mean_grad > 0]
        tau = float(np.percentile(nz, cfg.grad_percentile)) if nz.size else np.inf
    cand = mean_grad > tau

    in_band = np.zeros((N, K), dtype=bool)
    if selection is not None:
        if selection_parents is None:
            raise ValueError("grow_anchors: selection given without parent mapping")
        pa, po = selection_parents
        sel = selection.gaussian_mask
        in_band[pa[sel], po[sel]] = True
        cand &= in_band

    rows = []
    n_new = 0
    if cand.any():
        with gc.no_grad():
            l = np.exp(anchors.log_scalings.data)
            mu = anchors.positions.data[:, None, :] + anchors.offsets.data * l[:, None, :]
        ai, ki = np.nonzero(cand)
        cand_pos = mu[ai, ki]
        occupied = {tuple(c) for c in _voxel_cells(anchors.positions.data, cfg.voxel_size)}
        chosen: dict[tuple, int] = {}
        for idx in range(ai.size):
            cell = tuple(_voxel_cells(cand_pos[idx : idx + 1], cfg.voxel_size)[0])
            if cell in occupied or cell in chosen:
                continue
            chosen[cell] = idx
        if chosen:
            cells = np.array(list(chosen.keys()), dtype=np.int64)
            seeds = np.array(list(chosen.values()), dtype=np.intp)
            centers = (cells + 0.5) * cfg.voxel_size
            parents = ai[seeds]
            n_new = centers.shape[0]
            d = anchors.feature_dim
            new_feat = anchors.features.data[parents].copy()
            new_off = rng.uniform(-0.5, 0.5, size=(n_new, K, 3))
            new_ls = np.full((n_new, 3), np.log(cfg.voxel_size))

            def extend(t: Tensor, extra: np.ndarray):
                t.data = np.concatenate([t.data, extra], axis=0)
                if optimizer is not None:
                    optimizer.remap_rows(t, None, n_new)

            extend(anchors.positions, centers)
            extend(anchors.features, new_feat)
            extend(anchors.log_scalings, new_ls)
            extend(anchors.offsets, new_off)
            if f_prime is not None:
                extend(f_prime, f_prime.data[parents].copy())
            for idx in range(n_new):
                seeded_by = (int(ai[seeds[idx]]), int(ki[seeds[idx]]))
                rows.append(
                    {
                        "position": centers[idx],
                        "parent_anchor": seeded_by[0],
                        "parent_offset": seeded_by[1],
                        "in_band": bool(in_band[seeded_by]) if selection is not None else False,
                        "fag_active": selection is not None,
                    }
                )
    # accumulators restart for the next window (shape follows the new count)
    n_total = anchors.positions.shape[0]
    anchors.accumulated_grad = np.zeros((n_total, K))
    anchors.accumulated_opacity = np.zeros(n_total)
    anchors.observation_count = np.zeros(n_total, dtype=np.int64)
    return n_new, rows


def prune_anchors(
    anchors: AnchorSet,
    cfg: GrowConfig,
    f_prime: Tensor | None = None,
    optimizer: gc.Adam | None = None,
) -> int:
    """Drop anchors whose mean accumulated opacity fell below threshold.

    Never-observed anchors count as zero. Raises PruneRejected (mutating
    nothing) if every anchor would go.
    """
    obs = anchors.observation_count
    score = np.where(obs > 0, anchors.accumulated_opacity / np.maximum(obs, 1), 0.0)
    keep = np.flatnonzero(score >= cfg.prune_opacity_threshold)
    n_removed = anchors.positions.shape[0] - keep.size
    if keep.size == 0:
        raise PruneRejected("pruning would remove every anchor")
    if n_removed == 0:
        return 0

    def compact(t: Tensor):
        t.data = t.data[keep]
        if optimizer is not None:
            optimizer.remap_rows(t, keep)

    compact(anchors.positions)
    compact(anchors.features)
    compact(anchors.log_scalings)
    compact(anchors.offsets)
    if f_prime is not None:
        compact(f_prime)
    anchors.accumulated_grad = anchors.accumulated_grad[keep]
    anchors.accumulated_opacity = anchors.accumulated_opacity[keep]
    anchors.observation_count = anchors.observation_count[keep]
    return n_removed
