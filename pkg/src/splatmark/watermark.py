"""Watermark machinery: the learnable per-anchor embedding feature, the
quantization distortion layer that simulates compression rounding during
training, and the message decoder that reads bits from the low-frequency
DWT subband of a rendered image.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import gradcore as gc
from . import transforms as tf
from .gradcore import Tensor

Q0_DEFAULT = 1.0
MESSAGE_LENGTHS = (16, 32, 48, 64)
DECODER_CHANNELS = 32
DECODER_RES = 16
QDL_HIDDEN = 16
ENCODER_BOUND = 0.02  # max-abs residual the pretraining encoder may add


class PretrainingFailure(RuntimeError):
    """Held-out bit accuracy stayed below the required floor."""


def round_half_away(x):
    """round() with halves away from zero, fixed across platforms."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# embedding feature


class WatermarkFeature:
    """Learnable f' paired to an anchor set row-for-row."""

    def __init__(self, n_anchors: int, feature_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.f_prime = Tensor(rng.normal(0.0, 0.01, size=(n_anchors, feature_dim)), requires_grad=True)

    @classmethod
    def from_array(cls, arr) -> "WatermarkFeature":
        obj = cls.__new__(cls)
        obj.f_prime = arr if isinstance(arr, Tensor) else Tensor(arr, requires_grad=True)
        return obj


def watermarked_feature(f, f_prime) -> Tensor:
    """f + tanh(f'): the bounded watermark lives inside the anchor feature."""
    ft = f if isinstance(f, Tensor) else Tensor(f)
    fp = f_prime if isinstance(f_prime, Tensor) else Tensor(f_prime)
    if ft.shape != fp.shape:
        raise ValueError(f"watermarked_feature: shapes {ft.shape} != {fp.shape}")
    return ft + gc.tanh(fp)


# ---------------------------------------------------------------------------
# quantization distortion layer


class QuantizationDistortion:
    """Learned per-anchor quantization step q = Q0 (1 + tanh(MLP(f^w))).

    The refinement MLP's output layer starts at zero so q == Q0 until
    trained; mode is one of train-noise / eval-round / off.
    """

    MODES = ("train-noise", "eval-round", "off")

    def __init__(self, feature_dim: int, q0: float = Q0_DEFAULT, mode: str = "train-noise", seed: int = 0):
        if mode not in self.MODES:
            raise ValueError(f"unknown QDL mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.q0 = float(q0)
        self.mode = mode
        h = QDL_HIDDEN
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / feature_dim), (feature_dim, h)), requires_grad=True)
        self.b1 = Tensor(np.zeros(h), requires_grad=True)
        self.w2 = Tensor(np.zeros((h, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def named_arrays(self):
        return [("qdl.w1", self.w1), ("qdl.b1", self.b1), ("qdl.w2", self.w2), ("qdl.b2", self.b2)]

    def step_sizes(self, f_w) -> Tensor:
        """q per anchor, shape (N, 1), bounded in (0, 2 Q0)."""
        ft = f_w if isinstance(f_w, Tensor) else Tensor(f_w)
        r = gc.matmul(gc.relu(gc.matmul(ft, self.w1) + self.b1), self.w2) + self.b2
        return (gc.tanh(r) + 1.0) * self.q0

    def step_sizes_np(self, f_w: np.ndarray) -> np.ndarray:
        h = np.maximum(f_w @ self.w1.data + self.b1.data, 0.0)
        r = h @ self.w2.data + self.b2.data
        return self.q0 * (1.0 + np.tanh(r[:, 0]))


def quantization_distort(f_w: Tensor, qd: QuantizationDistortion, rng):
    """Inject uniform rounding noise scaled by the learned step.

    The noise draw is a constant within the step; gradients flow to the
    features and to the refinement MLP through q.
    """
    if qd.mode != "train-noise":
        raise ValueError(f"quantization_distort requires train-noise mode, got {qd.mode!r}")
    q = qd.step_sizes(f_w)
    u = rng.uniform(-0.5, 0.5, size=f_w.shape)
    return f_w + Tensor(u) * q, q


def quantize_round(f_w, q) -> np.ndarray:
    """Eval-time counterpart: snap each feature to its anchor's step grid."""
    f = f_w.data if isinstance(f_w, Tensor) else np.asarray(f_w, dtype=np.float64)
    qv = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    qv = qv.reshape(-1, 1) if qv.ndim == 1 else qv
    if np.any(qv <= 0):
        raise ValueError("quantize_round: steps must be positive")
    return round_half_away(f / qv) * qv


# ---------------------------------------------------------------------------
# message decoder


class MessageState:
    """Target bits plus the decoder that reads them back from rendered views."""

    def __init__(self, message, decoder_mode: str = "joint", seed: int = 0, decoder_res: int = DECODER_RES):
        message = np.asarray(message, dtype=np.uint8)
        if message.size not in MESSAGE_LENGTHS:
            raise ValueError(f"message length {message.size} not in {MESSAGE_LENGTHS}")
        if decoder_mode not in ("pretrain-frozen", "joint"):
            raise ValueError(f"unknown decoder mode {decoder_mode!r}")
        self.message = message
        self.decoder_mode = decoder_mode
        self.decoder_res = decoder_res
        rng = np.random.default_rng(seed)
        ch = DECODER_CHANNELS
        L = message.size

        def conv_w(ci, co):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / (9 * ci)), (3, 3, ci, co)), requires_grad=True)

        self.conv_w = [conv_w(3, ch), conv_w(ch, ch), conv_w(ch, ch), conv_w(ch, ch)]
        # half the first-layer filters start as +-center-surround detectors:
        # smooth texture backgrounds are near-invisible to them, which is the
        # difference between converging and chance-level stalls
        lap = np.array([[-1.0, -1, -1], [-1, 8, -1], [-1, -1, -1]]) / 8.0
        w0 = self.conv_w[0].data
        for co in range(ch // 2):
            w0[:, :, :, co] *= 0.1
            w0[:, :, co % 3, co] += lap * (0.8 if co % 2 == 0 else -0.8)
        self.conv_b = [Tensor(np.zeros(ch), requires_grad=True) for _ in range(4)]
        self.fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / ch), (ch, L)), requires_grad=True)
        self.fc_b = Tensor(np.zeros(L), requires_grad=True)

    @property
    def length(self) -> int:
        return int(self.message.size)

    def params(self):
        return [*self.conv_w, *self.conv_b, self.fc_w, self.fc_b]

    def named_arrays(self):
        out = []
        for i in range(4):
            out.append((f"dec.w{i}", self.conv_w[i]))
            out.append((f"dec.b{i}", self.conv_b[i]))
        out.append(("dec.fcw", self.fc_w))
        out.append(("dec.fcb", self.fc_b))
        return out

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
        self.decoder_mode = "pretrain-frozen"

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def run(self, x: Tensor) -> Tensor:
        """(B, res, res, 3) LL input -> (B, L) logits."""
        h = x
        for w, b in zip(self.conv_w, self.conv_b):
            h = gc.relu(gc.conv2d(h, w, stride=2, pad=1) + b)
        pooled = gc.avg_pool(h)
        return gc.matmul(pooled, self.fc_w) + self.fc_b


def decode_message_batch(images: Tensor, msg: MessageState) -> Tensor:
    """(B,H,W,3) images -> (B,L) logits via the LL subband.

    The subband is standardized per image before the conv stack: without it
    the watermark rides as a tiny perturbation on a large constant operating
    point and the decoder cannot train.
    """
    ll = tf.haar_dwt(images).LL
    B, h, w, c = ll.shape
    if (h, w) != (msg.decoder_res, msg.decoder_res):
        moved = gc.transpose(ll, (1, 2, 3, 0))
        moved = gc.bilinear_resize(moved, msg.decoder_res, msg.decoder_res)
        ll = gc.transpose(moved, (3, 0, 1, 2))
    mu = gc.mean(ll, axis=(1, 2, 3), keepdims=True)
    sd = gc.sqrt(gc.mean(gc.square(ll - mu), axis=(1, 2, 3), keepdims=True) + 1e-8)
    return msg.run((ll - mu) / sd)


def decode_message(image, msg: MessageState) -> Tensor:
    """Raw logits for one rendered (H,W,3) image."""
    t = image if isinstance(image, Tensor) else Tensor(image)
    batched = gc.reshape(t, (1,) + tuple(t.shape))
    return gc.reshape(decode_message_batch(batched, msg), (msg.length,))


def message_loss(logits, message) -> Tensor:
    """Binary cross entropy of sigmoid(logits) against the target bits."""
    lt = logits if isinstance(logits, Tensor) else Tensor(logits)
    m = np.asarray(message, dtype=np.float64)
    p = gc.sigmoid(lt)
    pos = gc.log(gc.clamp(p, lo=1e-12)) * Tensor(m)
    negt = gc.log(gc.clamp(1.0 - p, lo=1e-12)) * Tensor(1.0 - m)
    return -gc.sum_(pos + negt)


def message_loss_batch(logits: Tensor, messages: np.ndarray) -> Tensor:
    """Mean over batch of the per-sample BCE sums."""
    m = np.asarray(messages, dtype=np.float64)
    p = gc.sigmoid(logits)
    pos = gc.log(gc.clamp(p, lo=1e-12)) * Tensor(m)
    negt = gc.log(gc.clamp(1.0 - p, lo=1e-12)) * Tensor(1.0 - m)
    per_sample = gc.sum_(pos + negt, axis=1)
    return -gc.mean(per_sample)


# ---------------------------------------------------------------------------
# message files


def write_message(path, message: np.ndarray):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(str(int(b)) for b in message) + "\n")


def read_message(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        line = fh.readline().strip()
    if not line or set(line) - {"0", "1"}:
        raise ValueError(f"{path}: expected a line of 0/1 characters")
    return np.array([int(c) for c in line], dtype=np.uint8)


def random_message(length: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=length).astype(np.uint8)


# ---------------------------------------------------------------------------
# decoder pretraining on procedural textures


def value_noise_texture(rng, res: int, channels: int = 3) -> np.ndarray:
    """Multi-octave smoothed value noise, normalized into [0.1, 0.9]."""
    img = np.zeros((res, res, channels))
    amp = 1.0
    for cells in (4, 8, 16):
        grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1, channels))
        ys = np.linspace(0.0, cells, res)
        xs = np.linspace(0.0, cells, res)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        img += amp * (
            g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx
        )
        amp *= 0.5
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / max(hi - lo, 1e-9)


class _ResidualEncoder:
    """Pretraining-only helper that hides bits in a texture as a bounded residual.

    The message enters through a learnable per-bit code field initialized to
    strong block-noise carriers; the conv stack adds an image-adaptive
    refinement on top. Starting from ready-made spatial carriers matters: a
    conv net alone produces near-constant residuals on uniform images, which
    cannot carry the bits, and joint training never escapes that basin.
    """

    CODE_BLOCK = 4  # carrier block size in pixels; keeps energy in the LL band
    CODE_RMS_TOTAL = 1.32  # pre-tanh amplitude budget shared by all bits

    def __init__(self, length: int, rng, res: int = 32, ch: int = 12, msg_ch: int = 8):
        cells = res // self.CODE_BLOCK
        base = rng.normal(0.0, 1.0, size=(length, cells * cells * 3))
        ortho, _ = np.linalg.qr(base.T)  # orthogonal carriers: no inter-bit crosstalk
        per_bit = self.CODE_RMS_TOTAL / np.sqrt(length)
        base = (ortho.T[:length] * np.sqrt(base.shape[1]) * per_bit).reshape(
            length, cells, cells, 3
        )
        base = np.repeat(np.repeat(base, self.CODE_BLOCK, axis=1), self.CODE_BLOCK, axis=2)
        self.code = Tensor(base, requires_grad=True)
        self.msg_proj = Tensor(rng.normal(0.0, 0.3, (length, msg_ch)), requires_grad=True)
        cin = 3 + msg_ch
        self.ws = [
            Tensor(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, ch)), requires_grad=True),
            Tensor(rng.normal(0.0, np.sqrt(2.0 / (9 * ch)), (3, 3, ch, ch)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.05 * np.sqrt(2.0 / (9 * ch)), (3, 3, ch, 3)), requires_grad=True),
        ]
        self.bs = [Tensor(np.zeros(s), requires_grad=True) for s in (ch, ch, 3)]

    def params(self):
        return [self.code, self.msg_proj, *self.ws, *self.bs]

    def run(self, images: Tensor, messages: np.ndarray) -> Tensor:
        B, H, W, _ = images.shape
        signs = Tensor(2.0 * np.asarray(messages, dtype=np.float64) - 1.0)
        L = signs.shape[1]
        carrier = gc.reshape(gc.matmul(signs, gc.reshape(self.code, (L, H * W * 3))), (B, H, W, 3))
        planes = gc.matmul(signs, self.msg_proj)
        planes = gc.broadcast_to(gc.reshape(planes, (B, 1, 1, planes.shape[1])), (B, H, W, planes.shape[1]))
        h = gc.concat([images, planes], axis=3)
        h = gc.relu(gc.conv2d(h, self.ws[0], stride=1, pad=1) + self.bs[0])
        h = gc.relu(gc.conv2d(h, self.ws[1], stride=1, pad=1) + self.bs[1])
        refine = gc.conv2d(h, self.ws[2], stride=1, pad=1) + self.bs[2]
        return images + gc.tanh(carrier + refine) * ENCODER_BOUND


_BLUR3 = np.array([0.25, 0.5, 0.25])


def _distort_batch(images: Tensor, kind: str, rng) -> Tensor:
    B, H, W, C = images.shape
    if kind == "identity":
        return images
    if kind == "noise":
        sigma = rng.uniform(0.005, 0.02)
        return gc.clamp(images + Tensor(rng.normal(0.0, sigma, images.shape)), 0.0, 1.0)
    if kind == "blur":
        moved = gc.transpose(images, (1, 2, 3, 0))
        moved = gc.gaussian_filter_same(moved, _BLUR3)
        return gc.transpose(moved, (3, 0, 1, 2))
    if kind == "crop":
        keep = np.sqrt(rng.uniform(0.75, 1.0))  # crop away up to 25% of the area
        ch, cw = int(round(H * keep)), int(round(W * keep))
        r0 = int(rng.integers(0, H - ch + 1))
        c0 = int(rng.integers(0, W - cw + 1))
        window = gc.slice_(images, (slice(None), slice(r0, r0 + ch), slice(c0, c0 + cw), slice(None)))
        moved = gc.transpose(window, (1, 2, 3, 0))
        moved = gc.bilinear_resize(moved, H, W)
        return gc.transpose(moved, (3, 0, 1, 2))
    raise ValueError(kind)


_DISTORTIONS = ("identity", "noise", "blur", "crop")


def bit_accuracy_from_logits(logits: np.ndarray, messages: np.ndarray) -> float:
    bits = (logits >= 0.0).astype(np.uint8)  # sigmoid(0) = 0.5 counts as 1
    return float((bits == messages).mean())


PRETRAIN_CONTRAST = 0.35  # texture contrast around mid-gray
_WARMUP_STEPS = 400  # identity-only phase before distortions mix in
_KIND_SCHEDULE = ("identity", "noise", "blur", "crop", "crop")  # crop oversampled


def _pretrain_texture(rng, res: int) -> np.ndarray:
    tex = value_noise_texture(rng, res)
    return 0.5 + PRETRAIN_CONTRAST * (tex - 0.5)


def pretrain_decoder(
    length: int,
    seed: int,
    steps: int = 2200,
    batch: int = 8,
    texture_res: int = 32,
    lr: float = 5e-3,
    holdout: int = 64,
    accuracy_floor: float = 0.95,
) -> tuple[MessageState, dict]:
    """Train encoder+decoder on seeded textures, then freeze the decoder.

    The throwaway encoder hides random messages as bounded residuals; the
    decoder learns to read them through a per-batch distortion draw. Each
    batch carries antithetic message pairs on shared textures (the texture
    noise cancels out of the message gradient). Returns the frozen
    MessageState (message bits are set later by the caller) and a stats dict;
    raises PretrainingFailure below the held-out accuracy floor.
    """
    if batch % 2:
        raise ValueError("pretrain_decoder: batch must be even (antithetic pairs)")
    rng = np.random.default_rng(seed)
    msg = MessageState(
        np.zeros(length, dtype=np.uint8),
        decoder_mode="joint",
        seed=seed + 1,
        decoder_res=texture_res // 2,
    )
    enc = _ResidualEncoder(length, rng, res=texture_res)
    opt = gc.Adam(
        [
            {"name": "decoder", "params": msg.params(), "lr": lr},
            {"name": "encoder", "params": enc.params(), "lr": 0.6 * lr},
        ]
    )
    losses = []
    half = batch // 2
    for step in range(steps):
        if step == int(0.7 * steps):
            opt.set_lr("decoder", 0.3 * lr)
            opt.set_lr("encoder", 0.2 * lr)
        tex = np.stack([_pretrain_texture(rng, texture_res) for _ in range(half)])
        textures = np.concatenate([tex, tex])
        m = rng.integers(0, 2, size=(half, length))
        messages = np.concatenate([m, 1 - m])
        if step > _WARMUP_STEPS:
            kind = _KIND_SCHEDULE[int(rng.integers(0, len(_KIND_SCHEDULE)))]
        else:
            kind = "identity"
        opt.zero_grad()
        with gc.Tape():
            encoded = enc.run(Tensor(textures), messages)
            distorted = _distort_batch(encoded, kind, rng)
            logits = decode_message_batch(distorted, msg)
            loss = message_loss_batch(logits, messages)
            gc.backward(loss)
        opt.step()
        losses.append(loss.item())

    # held-out accuracy over fresh textures and the full distortion set
    correct, total = 0, 0
    per_kind: dict[str, float] = {}
    for kind in _DISTORTIONS:
        k_correct, k_total = 0, 0
        for _ in range(holdout // len(_DISTORTIONS)):
            textures = np.stack([_pretrain_texture(rng, texture_res) for _ in range(4)])
            messages = rng.integers(0, 2, size=(4, length))
            with gc.no_grad():
                encoded = enc.run(Tensor(textures), messages)
                distorted = _distort_batch(encoded, kind, rng)
                logits = decode_message_batch(distorted, msg)
            bits = (logits.data >= 0.0).astype(np.uint8)
            k_correct += int((bits == messages).sum())
            k_total += messages.size
        per_kind[kind] = k_correct / k_total
        correct += k_correct
        total += k_total
    accuracy = correct / total
    stats = {"holdout_accuracy": accuracy, "per_distortion": per_kind, "final_loss": losses[-1]}
    if accuracy < accuracy_floor:
        raise PretrainingFailure(
            f"held-out bit accuracy {accuracy:.3f} below {accuracy_floor:.2f} after {steps} steps"
        )
    msg.freeze()
    return msg, stats
