"""Anchor-based scene representation.

Anchors carry a context feature, a per-axis scaling, and K learnable offsets;
per view, each visible anchor expands into K neural Gaussians whose position
is anchor + offset * scaling and whose color/rotation/scale/opacity come from
small per-attribute MLP heads evaluated on (feature, view distance, view
direction).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

NEAR_PLANE = 0.05
FRUSTUM_MARGIN = 0.10  # fractional dilation of the view frustum
MIN_CAMERA_DISTANCE = 1e-9


class AnchorSet:
    """Learnable anchor arrays plus growth/prune statistics."""

    def __init__(self, positions, features, log_scalings, offsets):
        self.positions = positions if isinstance(positions, Tensor) else Tensor(positions, requires_grad=True)
        self.features = features if isinstance(features, Tensor) else Tensor(features, requires_grad=True)
        self.log_scalings = (
            log_scalings if isinstance(log_scalings, Tensor) else Tensor(log_scalings, requires_grad=True)
        )
        self.offsets = offsets if isinstance(offsets, Tensor) else Tensor(offsets, requires_grad=True)
        n, k = self.offsets.shape[0], self.offsets.shape[1]
        self.accumulated_grad = np.zeros((n, k))
        self.accumulated_opacity = np.zeros(n)
        self.observation_count = np.zeros(n, dtype=np.int64)

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def offsets_per_anchor(self) -> int:
        return self.offsets.shape[1]

    def params(self):
        return [self.positions, self.features, self.log_scalings, self.offsets]

    def reset_stats(self):
        self.accumulated_grad[:] = 0.0
        self.accumulated_opacity[:] = 0.0
        self.observation_count[:] = 0


@dataclass
class ViewContext:
    view_matrix: np.ndarray  # 4x4 rigid world->camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.view_matrix = np.asarray(self.view_matrix, dtype=np.float64)
        R = self.view_matrix[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("view matrix rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.view_matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view_matrix[:3, 3]

    @property
    def camera_position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def _mlp_layers(rng, dims, final_bias=None, final_scale=0.1):
    params = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[i], dims[i + 1]))
        b = np.zeros(dims[i + 1])
        if i == len(dims) - 2:
            w *= final_scale
            if final_bias is not None:
                b = b + final_bias
        params.append(Tensor(w, requires_grad=True))
        params.append(Tensor(b, requires_grad=True))
    return params


class AttributeHeads:
    """Separate color / rotation / scale / opacity MLPs (two hidden layers)."""

    HEAD_NAMES = ("color", "rotation", "scale", "opacity")

    def __init__(self, feature_dim: int, offsets_per_anchor: int, hidden: int = 32, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        d, K, h = feature_dim, offsets_per_anchor, hidden
        self.feature_dim = d
        self.offsets_per_anchor = K
        self.hidden = h
        din = d + 4
        rot_bias = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), K)
        self.heads = {
            "color": _mlp_layers(rng, (din, h, h, 3 * K)),
            "rotation": _mlp_layers(rng, (din, h, h, 4 * K), final_bias=rot_bias),
            "scale": _mlp_layers(rng, (din, h, h, 3 * K), final_bias=np.log(0.3)),
            "opacity": _mlp_layers(rng, (din, h, h, K), final_bias=0.1),
        }

    def params(self):
        out = []
        for name in self.HEAD_NAMES:
            out.extend(self.heads[name])
        return out

    def named_arrays(self):
        out = []
        for name in self.HEAD_NAMES:
            layers = self.heads[name]
            for i, t in enumerate(layers):
                kind = "w" if i % 2 == 0 else "b"
                out.append((f"{name}.{kind}{i // 2}", t))
        return out

    def run(self, name: str, x: Tensor) -> Tensor:
        w0, b0, w1, b1, w2, b2 = self.heads[name]
        h = gc.relu(gc.matmul(x, w0) + b0)
        h = gc.relu(gc.matmul(h, w1) + b1)
        return gc.matmul(h, w2) + b2


@dataclass
class NeuralGaussianBatch:
    """Per-view expansion of visible anchors, opacity-culled."""

    means: Tensor  # (M, 3)
    rotations: Tensor  # (M, 4) unit quaternions
    scales: Tensor  # (M, 3) positive
    opacities: Tensor  # (M,) in (0, 1)
    colors: Tensor  # (M, 3) in [0, 1]
    parent_anchor: np.ndarray  # (M,) anchor row per gaussian
    parent_offset: np.ndarray  # (M,) offset slot per gaussian
    visible_anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    skipped_near_camera: int = 0

    @property
    def count(self) -> int:
        return self.means.shape[0]


def init_scene(point_cloud: np.ndarray, voxel_size: float, d: int, K: int, seed: int) -> AnchorSet:
    """One anchor per occupied voxel, placed at the voxel center."""
    pts = np.asarray(point_cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError("init_scene: point cloud must be a non-empty Px3 array")
    if voxel_size <= 0:
        raise ValueError("init_scene: voxel_size must be positive")
    cells = np.floor(pts / voxel_size).astype(np.int64)
    uniq = np.unique(cells, axis=0)  # lexicographic, deterministic
    centers = (uniq + 0.5) * voxel_size
    n = centers.shape[0]
    rng = np.random.default_rng(seed)
    features = rng.normal(0.0, 0.01, size=(n, d))
    offsets = rng.uniform(-0.5, 0.5, size=(n, K, 3))
    log_scalings = np.full((n, 3), np.log(voxel_size))
    return AnchorSet(centers, features, log_scalings, offsets)


def frustum_mask(positions: np.ndarray, view: ViewContext):
    """Anchors inside the 10%-dilated frustum and past the near plane."""
    t = positions @ view.rotation.T + view.translation
    tz = t[:, 2]
    safe_z = np.maximum(tz, NEAR_PLANE)
    px = view.fx * t[:, 0] / safe_z + view.cx
    py = view.fy * t[:, 1] / safe_z + view.cy
    mx = 0.5 * FRUSTUM_MARGIN * view.width
    my = 0.5 * FRUSTUM_MARGIN * view.height
    visible = (
        (tz > NEAR_PLANE)
        & (px >= -mx)
        & (px <= view.width + mx)
        & (py >= -my)
        & (py <= view.height + my)
    )
    return visible


def generate_gaussians(
    anchors: AnchorSet,
    heads: AttributeHeads,
    view: ViewContext,
    feature_override: Tensor | None = None,
) -> NeuralGaussianBatch:
    """Expand visible anchors into neural Gaussians for one view.

    `feature_override` substitutes the anchor features (same N x d shape);
    watermarked or quantized features are injected this way. Differentiable
    w.r.t. positions, features/override, offsets, scalings, head parameters;
    the view distance and direction inputs are treated as constants.
    """
    feats = feature_override if feature_override is not None else anchors.features
    if feats.shape != anchors.features.shape:
        raise ValueError(
            f"feature_override shape {feats.shape} != {anchors.features.shape}"
        )
    pos = anchors.positions.data
    cam = view.camera_position
    delta = np.linalg.norm(pos - cam, axis=1)
    near_cam = delta < MIN_CAMERA_DISTANCE
    vis = frustum_mask(pos, view) & ~near_cam
    vis_idx = np.flatnonzero(vis)
    K = anchors.offsets_per_anchor
    if vis_idx.size == 0:
        empty = Tensor(np.zeros((0, 3)))
        return NeuralGaussianBatch(
            means=empty,
            rotations=Tensor(np.zeros((0, 4))),
            scales=Tensor(np.zeros((0, 3))),
            opacities=Tensor(np.zeros(0)),
            colors=Tensor(np.zeros((0, 3))),
            parent_anchor=np.zeros(0, dtype=np.intp),
            parent_offset=np.zeros(0, dtype=np.intp),
            visible_anchors=vis_idx,
            skipped_near_camera=int(near_cam.sum()),
        )

    x_a = gc.gather_rows(anchors.positions, vis_idx)  # (V,3)
    f = gc.gather_rows(feats, vis_idx)  # (V,d)
    l = gc.exp(gc.gather_rows(anchors.log_scalings, vis_idx))  # (V,3)
    O = gc.gather_rows(anchors.offsets, vis_idx)  # (V,K,3)
    V = vis_idx.size

    mu = gc.reshape(x_a, (V, 1, 3)) + O * gc.reshape(l, (V, 1, 3))
    mu = gc.reshape(mu, (V * K, 3))

    dvec = pos[vis_idx] - cam
    dist = np.linalg.norm(dvec, axis=1, keepdims=True)
    head_in = gc.concat([f, Tensor(dist), Tensor(dvec / dist)], axis=1)

    color = gc.sigmoid(gc.reshape(heads.run("color", head_in), (V * K, 3)))
    rot = gc.normalize(gc.reshape(heads.run("rotation", head_in), (V * K, 4)), axis=-1)
    scale_raw = gc.reshape(heads.run("scale", head_in), (V, K, 3))
    scale = gc.reshape(gc.exp(scale_raw) * gc.reshape(l, (V, 1, 3)), (V * K, 3))
    opacity = gc.reshape(gc.tanh(heads.run("opacity", head_in)), (V * K,))

    keep = np.flatnonzero(opacity.data > 0.0)
    parent_anchor = np.repeat(vis_idx, K)[keep]
    parent_offset = np.tile(np.arange(K, dtype=np.intp), V)[keep]
    return NeuralGaussianBatch(
        means=gc.gather_rows(mu, keep),
        rotations=gc.gather_rows(rot, keep),
        scales=gc.gather_rows(scale, keep),
        opacities=gc.gather_rows(opacity, keep),
        colors=gc.gather_rows(color, keep),
        parent_anchor=parent_anchor,
        parent_offset=parent_offset,
        visible_anchors=vis_idx,
        skipped_near_camera=int(near_cam.sum()),
    )
