"""Differentiable CPU rasterization of neural Gaussians.

Projection builds each Gaussian's 2-D screen covariance from its quaternion
and scale through the perspective Jacobian at the mean; compositing blends
front to back with per-pixel transmittance. Both are single tape ops with
hand-derived vectorized backwards. Depth ordering, pixel rounding and all
culling masks are gradient-stop boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .scene import NEAR_PLANE, AnchorSet, NeuralGaussianBatch, ViewContext

COV_DILATION = 0.3  # px^2 added to both screen-covariance eigenvalues
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
BBOX_SIGMAS = 3.0


@dataclass
class ProjectedGaussians:
    """Screen-space parameters; `packed` columns are (u, v, cov_a, cov_b, cov_c)."""

    packed: Tensor  # (M, 5)
    depths: np.ndarray  # (M,) camera-space z, gradient-stopped
    in_front: np.ndarray  # (M,) bool, past the near plane

    @property
    def mean2d(self) -> Tensor:
        return gc.slice_(self.packed, (slice(None), slice(0, 2)))

    @property
    def cov2d(self) -> Tensor:
        return gc.slice_(self.packed, (slice(None), slice(2, 5)))


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rot_grad_wrt_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Contract dR/dq with gR for unit quaternions (w,x,y,z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty_like(q)
    g[:, 0] = 2 * (
        -z * gR[:, 0, 1] + y * gR[:, 0, 2] + z * gR[:, 1, 0] - x * gR[:, 1, 2] - y * gR[:, 2, 0] + x * gR[:, 2, 1]
    )
    g[:, 1] = 2 * (
        y * gR[:, 0, 1] + z * gR[:, 0, 2] + y * gR[:, 1, 0] - 2 * x * gR[:, 1, 1] - w * gR[:, 1, 2]
        + z * gR[:, 2, 0] + w * gR[:, 2, 1] - 2 * x * gR[:, 2, 2]
    )
    g[:, 2] = 2 * (
        -2 * y * gR[:, 0, 0] + x * gR[:, 0, 1] + w * gR[:, 0, 2] + x * gR[:, 1, 0] + z * gR[:, 1, 2]
        - w * gR[:, 2, 0] + z * gR[:, 2, 1] - 2 * y * gR[:, 2, 2]
    )
    g[:, 3] = 2 * (
        -2 * z * gR[:, 0, 0] - w * gR[:, 0, 1] + x * gR[:, 0, 2] + w * gR[:, 1, 0] - 2 * z * gR[:, 1, 1]
        + y * gR[:, 1, 2] + x * gR[:, 2, 0] + y * gR[:, 2, 1]
    )
    return g


def project(batch: NeuralGaussianBatch, view: ViewContext) -> ProjectedGaussians:
    """Perspective projection of means and covariances for one view."""
    means, quats, scales = batch.means, batch.rotations, batch.scales
    Rv = view.rotation
    tv = view.translation
    fx, fy, cx, cy = view.fx, view.fy, view.cx, view.cy

    t = means.data @ Rv.T + tv
    in_front = t[:, 2] > NEAR_PLANE
    tz = np.maximum(t[:, 2], NEAR_PLANE)  # clamped only for dropped rows
    tx, ty = t[:, 0], t[:, 1]

    M = means.data.shape[0]
    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2

    R3 = _quat_to_rot(quats.data)
    M3 = R3 * scales.data[:, None, :]
    sigma_w = M3 @ np.swapaxes(M3, 1, 2)
    sigma_c = np.einsum("ij,mjk,lk->mil", Rv, sigma_w, Rv)
    C2 = np.einsum("mij,mjk,mlk->mil", J, sigma_c, J)

    packed = np.empty((M, 5))
    packed[:, 0] = fx * tx / tz + cx
    packed[:, 1] = fy * ty / tz + cy
    packed[:, 2] = C2[:, 0, 0] + COV_DILATION
    packed[:, 3] = C2[:, 0, 1]
    packed[:, 4] = C2[:, 1, 1] + COV_DILATION

    def bwd(g):
        G2 = np.zeros((M, 2, 2))
        G2[:, 0, 0] = g[:, 2]
        G2[:, 0, 1] = g[:, 3]
        G2[:, 1, 1] = g[:, 4]
        g_sigma_c = np.einsum("mji,mjk,mkl->mil", J, G2, J)
        gJ = np.einsum("mij,mjk,mlk->mil", G2, J, sigma_c) + np.einsum(
            "mji,mjk,mkl->mil", G2, J, sigma_c
        )
        gt = np.zeros((M, 3))
        gt[:, 0] = gJ[:, 0, 2] * (-fx / tz**2) + g[:, 0] * fx / tz
        gt[:, 1] = gJ[:, 1, 2] * (-fy / tz**2) + g[:, 1] * fy / tz
        gt[:, 2] = (
            gJ[:, 0, 0] * (-fx / tz**2)
            + gJ[:, 0, 2] * (2 * fx * tx / tz**3)
            + gJ[:, 1, 1] * (-fy / tz**2)
            + gJ[:, 1, 2] * (2 * fy * ty / tz**3)
            + g[:, 0] * (-fx * tx / tz**2)
            + g[:, 1] * (-fy * ty / tz**2)
        )
        gt *= in_front[:, None]
        g_means = gt @ Rv
        g_sigma_w = np.einsum("ji,mjk,kl->mil", Rv, g_sigma_c, Rv)
        gM3 = (g_sigma_w + np.swapaxes(g_sigma_w, 1, 2)) @ M3
        gM3 *= in_front[:, None, None]
        gR3 = gM3 * scales.data[:, None, :]
        g_scales = np.einsum("mij,mij->mj", gM3, R3)
        g_quats = _rot_grad_wrt_quat(quats.data, gR3)
        return (g_means, g_quats, g_scales)

    packed_t = gc.record("project", (means, quats, scales), packed, bwd)
    return ProjectedGaussians(packed=packed_t, depths=t[:, 2].copy(), in_front=in_front)


@dataclass
class SplatFrame:
    """Rendered image plus the screen-space intermediates growth needs."""

    image: Tensor  # (H, W, 3) in [0, 1]
    transmittance: np.ndarray  # (H, W) residual after all gaussians
    screen_means: np.ndarray  # (M, 2) forward values
    parent_anchor: np.ndarray
    parent_offset: np.ndarray
    opacities: np.ndarray  # (M,) forward opacity values
    visible_anchors: np.ndarray
    screen_grad_norms: np.ndarray | None = None  # filled by composite backward
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


def composite(
    projected: ProjectedGaussians,
    colors: Tensor,
    opacities: Tensor,
    H: int,
    W: int,
    background,
    parent_anchor=None,
    parent_offset=None,
    visible_anchors=None,
    ids=None,
) -> SplatFrame:
    """Front-to-back alpha blending over a gradient-stopped depth order.

    Ties in depth break by gaussian id (input index when `ids` is omitted),
    so permuting the input order never changes the image.
    """
    bg = np.asarray(background, dtype=np.float64)
    packed = projected.packed
    M = packed.data.shape[0]
    tie = np.arange(M) if ids is None else np.asarray(ids)
    order = np.lexsort((tie, projected.depths))
    order = order[projected.in_front[order]]

    image = np.zeros((H, W, 3))
    T = np.ones((H, W))
    entries: list = []

    data = packed.data
    cols_all = colors.data
    opac_all = opacities.data
    for gi in order:
        u, v, a, b, c = data[gi]
        det = a * c - b * b
        if det <= 1e-12:
            entries.append(None)
            continue
        A00, A01, A11 = c / det, -b / det, a / det
        lam_max = 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
        r = BBOX_SIGMAS * np.sqrt(lam_max)
        col0 = max(0, int(np.floor(u - r)))
        col1 = min(W, int(np.ceil(u + r)) + 1)
        row0 = max(0, int(np.floor(v - r)))
        row1 = min(H, int(np.ceil(v + r)) + 1)
        if col0 >= col1 or row0 >= row1:
            entries.append(None)
            continue
        dx = np.arange(col0, col1) + 0.5 - u
        dy = np.arange(row0, row1) + 0.5 - v
        sig = (
            0.5 * A00 * dx[None, :] ** 2
            + A01 * dy[:, None] * dx[None, :]
            + 0.5 * A11 * dy[:, None] ** 2
        )
        gauss = np.exp(-sig)
        o = opac_all[gi]
        alpha_raw = o * gauss
        alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
        Tbef = T[row0:row1, col0:col1]
        live = (alpha >= ALPHA_SKIP) & (Tbef >= TRANSMITTANCE_EPS)
        alpha = np.where(live, alpha, 0.0)
        unclamped = live & (alpha_raw < ALPHA_CLAMP)
        w_pix = alpha * Tbef
        image[row0:row1, col0:col1] += w_pix[:, :, None] * cols_all[gi]
        entries.append((row0, col0, alpha, Tbef.copy(), unclamped))
        T[row0:row1, col0:col1] = Tbef * (1.0 - alpha)

    image += T[:, :, None] * bg
    np.clip(image, 0.0, 1.0, out=image)
    T_final = T.copy()
    grad_norms = np.zeros(M)
    frame_ref: list = [None]

    def bwd(g):
        S = T_final[:, :, None] * bg
        g_packed = np.zeros((M, 5))
        g_colors = np.zeros((M, 3))
        g_opac = np.zeros(M)
        data_ = packed.data
        for k in range(len(order) - 1, -1, -1):
            gi = order[k]
            entry = entries[k]
            if entry is None:
                continue
            row0, col0, alpha, Tbef, unclamped = entry
            hb, wb = alpha.shape
            gsub = g[row0 : row0 + hb, col0 : col0 + wb]
            Ssub = S[row0 : row0 + hb, col0 : col0 + wb]
            w_pix = alpha * Tbef
            ci = cols_all[gi]
            g_colors[gi] = np.einsum("ijc,ij->c", gsub, w_pix)
            # d image / d alpha: own contribution minus the suffix scaled back
            # by this gaussian's transmittance factor
            galpha = np.einsum(
                "ijc,ijc->ij",
                gsub,
                ci[None, None, :] * Tbef[:, :, None] - Ssub / (1.0 - alpha)[:, :, None],
            )
            # alpha = min(0.99, o * exp(-sig)); gradient stops at the clamp
            galpha_eff = np.where(unclamped, galpha, 0.0)
            o = opac_all[gi]
            if o != 0.0:
                g_opac[gi] = float((galpha_eff * alpha).sum() / o)
            gsig = -galpha_eff * alpha
            u, v, a, b, c = data_[gi]
            det = a * c - b * b
            A00, A01, A11 = c / det, -b / det, a / det
            dx = np.arange(col0, col0 + wb) + 0.5 - u
            dy = np.arange(row0, row0 + hb) + 0.5 - v
            DX = dx[None, :]
            DY = dy[:, None]
            S00 = float((gsig * 0.5 * DX**2).sum())
            S01 = float((gsig * DX * DY).sum())
            S11 = float((gsig * 0.5 * DY**2).sum())
            g_packed[gi, 2] = -(S00 * A00 * A00 + S01 * A00 * A01 + S11 * A01 * A01)
            g_packed[gi, 3] = -(
                2 * S00 * A00 * A01 + S01 * (A00 * A11 + A01 * A01) + 2 * S11 * A01 * A11
            )
            g_packed[gi, 4] = -(S00 * A01 * A01 + S01 * A01 * A11 + S11 * A11 * A11)
            g_packed[gi, 0] = float((gsig * (-A00 * DX - A01 * DY)).sum())
            g_packed[gi, 1] = float((gsig * (-A01 * DX - A11 * DY)).sum())
            S[row0 : row0 + hb, col0 : col0 + wb] = Ssub + w_pix[:, :, None] * ci
        grad_norms[:] = np.hypot(g_packed[:, 0], g_packed[:, 1])
        if frame_ref[0] is not None:
            frame_ref[0].screen_grad_norms = grad_norms
        return (g_packed, g_colors, g_opac)

    img_t = gc.record("composite", (packed, colors, opacities), image, bwd)
    frame = SplatFrame(
        image=img_t,
        transmittance=T_final,
        screen_means=data[:, :2].copy(),
        parent_anchor=parent_anchor if parent_anchor is not None else np.zeros(M, dtype=np.intp),
        parent_offset=parent_offset if parent_offset is not None else np.zeros(M, dtype=np.intp),
        opacities=opac_all.copy(),
        visible_anchors=visible_anchors if visible_anchors is not None else np.zeros(0, dtype=np.intp),
        background=bg,
    )
    frame_ref[0] = frame
    return frame


def render_view(
    batch: NeuralGaussianBatch, view: ViewContext, background=(0.0, 0.0, 0.0)
) -> SplatFrame:
    """Project + composite one generated batch."""
    proj = project(batch, view)
    return composite(
        proj,
        batch.colors,
        batch.opacities,
        view.height,
        view.width,
        background,
        parent_anchor=batch.parent_anchor,
        parent_offset=batch.parent_offset,
        visible_anchors=batch.visible_anchors,
    )


def accumulate_growth_stats(frame: SplatFrame, anchors: AnchorSet):
    """Fold one frame's screen-gradient norms and opacities into the anchors."""
    if frame.screen_grad_norms is None:
        raise RuntimeError("accumulate_growth_stats: composite backward has not run")
    np.add.at(
        anchors.accumulated_grad,
        (frame.parent_anchor, frame.parent_offset),
        frame.screen_grad_norms,
    )
    np.add.at(anchors.accumulated_opacity, frame.parent_anchor, frame.opacities)
    anchors.observation_count[frame.visible_anchors] += 1


# ---------------------------------------------------------------------------
# PPM image I/O (binary P6, maxval 255)


def write_ppm(path, image: np.ndarray):
    img = np.asarray(image, dtype=np.float64)
    data = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    pix = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


def write_diff_ppm(path, a: np.ndarray, b: np.ndarray, amplify: float = 5.0):
    """Absolute difference map, amplified (x5 by convention)."""
    write_ppm(path, np.clip(np.abs(a - b) * amplify, 0.0, 1.0))
