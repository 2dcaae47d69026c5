"""Attack suites and quality metrics.

Image attacks distort rendered views before message extraction; model attacks
perturb a deep copy of the scene itself. Every attack is pure given its seed,
and output image dimensions always match the input so the decoder path stays
uniform.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import transforms as tf
from .gradcore import Tensor, no_grad
from .gradcore.nn import bilinear_sample
from .scene import AnchorSet, AttributeHeads
from .sceneio import WatermarkBundle
from .watermark import round_half_away

IMAGE_ATTACK_KINDS = ("gaussian-noise", "rotation", "scaling", "gaussian-blur", "crop", "jpeg")
MODEL_ATTACK_KINDS = ("param-noise", "clone", "prune")


@dataclass
class ImageAttack:
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in IMAGE_ATTACK_KINDS:
            raise ValueError(f"unknown image attack {self.kind!r}")

    def label(self) -> str:
        return f"{self.kind}({self.param:g})"


@dataclass
class ModelAttack:
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_ATTACK_KINDS:
            raise ValueError(f"unknown model attack {self.kind!r}")

    def label(self) -> str:
        return f"{self.kind}({self.param:g})"


def default_image_suite(seed: int = 0) -> list[ImageAttack]:
    """The six distortions; noise appears at both reported strengths."""
    return [
        ImageAttack("gaussian-noise", 0.005, seed),
        ImageAttack("gaussian-noise", 0.1, seed + 1),
        ImageAttack("rotation", np.pi / 6, seed + 2),
        ImageAttack("scaling", 0.75, seed + 3),
        ImageAttack("gaussian-blur", 0.1, seed + 4),
        ImageAttack("crop", 0.4, seed + 5),
        ImageAttack("jpeg", 50, seed + 6),
    ]


def default_model_suite(seed: int = 0) -> list[ModelAttack]:
    return [
        ModelAttack("param-noise", 0.005, seed),
        ModelAttack("clone", 0.5, seed + 1),
        ModelAttack("prune", 0.2, seed + 2),
    ]


# ---------------------------------------------------------------------------
# image attacks


def _resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    with no_grad():
        from .gradcore.nn import bilinear_resize

        return bilinear_resize(Tensor(image), out_h, out_w).data


def _rotate(image: np.ndarray, angle: float) -> np.ndarray:
    H, W = image.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    ca, sa = np.cos(-angle), np.sin(-angle)
    sy = cy + (ys - cy) * ca - (xs - cx) * sa
    sx = cx + (ys - cy) * sa + (xs - cx) * ca
    return bilinear_sample(image, sy, sx, fill=0.0)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    k = _gauss_kernel(sigma)
    with no_grad():
        from .gradcore.nn import gaussian_filter_same

        return gaussian_filter_same(Tensor(image), k).data


_JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_JPEG_CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def jpeg_quality_tables(quality: float):
    """Quantization tables scaled by the standard quality-factor rule."""
    quality = float(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tables = []
    for base in (_JPEG_LUMA_TABLE, _JPEG_CHROMA_TABLE):
        t = np.floor((base * scale + 50.0) / 100.0)
        tables.append(np.clip(t, 1, 255))
    return tables[0], tables[1]


_DCT8 = np.array(
    [
        [np.sqrt(1 / 8) if i == 0 else np.sqrt(2 / 8) * np.cos((2 * j + 1) * i * np.pi / 16) for j in range(8)]
        for i in range(8)
    ]
)


def dct_quantize_block(block: np.ndarray, table: np.ndarray) -> np.ndarray:
    """8x8 DCT -> quantize -> dequantize -> inverse; the whole jpeg distortion."""
    coeffs = _DCT8 @ block @ _DCT8.T
    quant = round_half_away(coeffs / table) * table
    return _DCT8.T @ quant @ _DCT8


_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


def _jpeg(image: np.ndarray, quality: float) -> np.ndarray:
    H, W = image.shape[:2]
    ph = (8 - H % 8) % 8
    pw = (8 - W % 8) % 8
    img = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0
    ycc = img @ _RGB_TO_YCBCR.T
    ycc[..., 0] -= 128.0
    luma_t, chroma_t = jpeg_quality_tables(quality)
    out = np.empty_like(ycc)
    Hp, Wp = ycc.shape[:2]
    for c in range(3):
        table = luma_t if c == 0 else chroma_t
        plane = ycc[..., c]
        res = np.empty_like(plane)
        for i in range(0, Hp, 8):
            for j in range(0, Wp, 8):
                res[i : i + 8, j : j + 8] = dct_quantize_block(plane[i : i + 8, j : j + 8], table)
        out[..., c] = res
    out[..., 0] += 128.0
    rgb = out @ _YCBCR_TO_RGB.T
    return np.clip(rgb[:H, :W] / 255.0, 0.0, 1.0)


def apply_image_attack(image: np.ndarray, attack: ImageAttack) -> np.ndarray:
    """Distort one [0,1] image; output shape equals input shape."""
    img = np.asarray(image, dtype=np.float64)
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError("apply_image_attack: image values must lie in [0,1]")
    H, W = img.shape[:2]
    rng = np.random.default_rng(attack.seed)
    kind, p = attack.kind, attack.param
    if kind == "gaussian-noise":
        if p < 0:
            raise ValueError("noise sigma must be >= 0")
        if p == 0:
            return img.copy()
        return np.clip(img + rng.normal(0.0, p, img.shape), 0.0, 1.0)
    if kind == "rotation":
        if not 0 <= p <= np.pi:
            raise ValueError("rotation range must lie in [0, pi]")
        angle = rng.uniform(-p, p)
        return _rotate(img, angle)
    if kind == "scaling":
        if p <= 0 or p > 4:
            raise ValueError("scaling factor out of range")
        if p == 1.0:
            return img.copy()
        h2, w2 = max(1, int(round(H * p))), max(1, int(round(W * p)))
        return _resize(_resize(img, h2, w2), H, W)
    if kind == "gaussian-blur":
        if p < 0:
            raise ValueError("blur sigma must be >= 0")
        if p == 0:
            return img.copy()
        return _blur(img, p)
    if kind == "crop":
        if not 0 < p <= 1:
            raise ValueError("crop keep-fraction must lie in (0, 1]")
        if p == 1.0:
            return img.copy()
        side = np.sqrt(p)
        ch, cw = max(1, int(round(H * side))), max(1, int(round(W * side)))
        r0 = int(rng.integers(0, H - ch + 1))
        c0 = int(rng.integers(0, W - cw + 1))
        return _resize(img[r0 : r0 + ch, c0 : c0 + cw], H, W)
    if kind == "jpeg":
        if not 1 <= p <= 100:
            raise ValueError("jpeg quality must lie in [1, 100]")
        return _jpeg(img, p)
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# model attacks


def apply_model_attack(
    anchors: AnchorSet,
    heads: AttributeHeads,
    watermark: WatermarkBundle | None,
    attack: ModelAttack,
):
    """Return perturbed deep copies; the originals are untouched."""
    anchors2 = copy.deepcopy(anchors)
    heads2 = copy.deepcopy(heads)
    wm2 = copy.deepcopy(watermark)
    rng = np.random.default_rng(attack.seed)
    kind, p = attack.kind, attack.param
    if kind == "param-noise":
        if p < 0:
            raise ValueError("noise sigma must be >= 0")
        learnable = anchors2.params() + heads2.params()
        if wm2 is not None:
            learnable.append(wm2.feature.f_prime)
        for t in learnable:
            t.data = t.data + rng.normal(0.0, p, t.data.shape)
        return anchors2, heads2, wm2
    if kind == "clone":
        if not 0 <= p <= 1:
            raise ValueError("clone fraction must lie in [0, 1]")
        n = anchors2.n_anchors
        count = int(round(n * p))
        idx = rng.choice(n, size=count, replace=False)
        idx.sort()

        def dup(t):
            t.data = np.concatenate([t.data, t.data[idx]], axis=0)

        for t in anchors2.params():
            dup(t)
        if wm2 is not None:
            dup(wm2.feature.f_prime)
        anchors2.accumulated_grad = np.zeros((n + count, anchors2.offsets_per_anchor))
        anchors2.accumulated_opacity = np.zeros(n + count)
        anchors2.observation_count = np.zeros(n + count, dtype=np.int64)
        return anchors2, heads2, wm2
    if kind == "prune":
        if not 0 <= p < 1:
            raise ValueError("prune fraction must lie in [0, 1)")
        n = anchors2.n_anchors
        count = int(round(n * p))
        removed = rng.choice(n, size=count, replace=False)
        keep = np.setdiff1d(np.arange(n), removed)

        def cut(t):
            t.data = t.data[keep]

        for t in anchors2.params():
            cut(t)
        if wm2 is not None:
            cut(wm2.feature.f_prime)
        anchors2.accumulated_grad = anchors2.accumulated_grad[keep]
        anchors2.accumulated_opacity = anchors2.accumulated_opacity[keep]
        anchors2.observation_count = anchors2.observation_count[keep]
        return anchors2, heads2, wm2
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# metrics


def bit_accuracy(logits, message) -> float:
    """Fraction of thresholded logits matching the bits; sigmoid=0.5 counts as 1."""
    lv = logits.data if hasattr(logits, "data") else np.asarray(logits, dtype=np.float64)
    m = np.asarray(message)
    if lv.shape != m.shape:
        raise ValueError(f"bit_accuracy: shapes {lv.shape} != {m.shape}")
    bits = (lv >= 0.0).astype(np.uint8)
    return float((bits == m).mean())


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} != {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    with no_grad():
        return float(tf.ssim_map(Tensor(a), Tensor(b)).data.mean())
