"""Scene container (.spm): anchors, attribute heads, optional watermark chunk.

Layout, little-endian throughout: magic "SPLM", u32 version=1, u32 N, u32 d,
u32 K, u32 L (0 when no watermark), u32 head hidden width; then f32 arrays in
fixed order: positions (N,3), log-scalings (N,3), offsets (N,K,3), features
(N,d), head parameters (per head color/rotation/scale/opacity: w0,b0,w1,b1,
w2,b2). When L > 0 a watermark chunk follows: f' (N,d) f32, message bits
packed 8 per byte, u32 decoder resolution, decoder parameters (4x conv w/b,
fc w/b) f32, refinement-MLP parameters (w1,b1,w2,b2) f32, f32 base step Q0.
All counts are validated on read; round trips are exact at 32-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._binio import FormatError, Reader, Writer
from .gradcore import Tensor
from .scene import AnchorSet, AttributeHeads
from .watermark import MessageState, QuantizationDistortion, WatermarkFeature

SPM_MAGIC = b"SPLM"
SPM_VERSION = 1


@dataclass
class WatermarkBundle:
    """Everything watermark-specific that travels with a scene."""

    feature: WatermarkFeature
    message_state: MessageState
    qdl: QuantizationDistortion

    @property
    def message(self) -> np.ndarray:
        return self.message_state.message


def serialize_scene(anchors: AnchorSet, heads: AttributeHeads, watermark: WatermarkBundle | None = None) -> bytes:
    n = anchors.n_anchors
    d = anchors.feature_dim
    k = anchors.offsets_per_anchor
    L = watermark.message_state.length if watermark is not None else 0
    w = Writer()
    w.raw(SPM_MAGIC)
    w.u32(SPM_VERSION)
    w.u32(n)
    w.u32(d)
    w.u32(k)
    w.u32(L)
    w.u32(heads.hidden)
    w.f32_array(anchors.positions.data)
    w.f32_array(anchors.log_scalings.data)
    w.f32_array(anchors.offsets.data)
    w.f32_array(anchors.features.data)
    for _, t in heads.named_arrays():
        w.f32_array(t.data)
    if watermark is not None:
        w.f32_array(watermark.feature.f_prime.data)
        w.raw(np.packbits(watermark.message_state.message).tobytes())
        w.u32(watermark.message_state.decoder_res)
        for _, t in watermark.message_state.named_arrays():
            w.f32_array(t.data)
        for _, t in watermark.qdl.named_arrays():
            w.f32_array(t.data)
        w.f32_array(np.array([watermark.qdl.q0]))
    return w.getvalue()


def deserialize_scene(data: bytes):
    r = Reader(data)
    r.expect_magic(SPM_MAGIC, "scene container")
    version = r.u32("version")
    if version != SPM_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    n = r.u32("anchor count")
    d = r.u32("feature dim")
    k = r.u32("offsets per anchor")
    L = r.u32("message length")
    hidden = r.u32("head width")
    positions = r.f32_array((n, 3), "positions")
    log_scalings = r.f32_array((n, 3), "log scalings")
    offsets = r.f32_array((n, k, 3), "offsets")
    features = r.f32_array((n, d), "features")
    heads = AttributeHeads(d, k, hidden=hidden)
    for name, t in heads.named_arrays():
        new = r.f32_array(t.data.shape, name)
        t.data = new
    watermark = None
    if L:
        f_prime = r.f32_array((n, d), "watermark feature")
        packed = np.frombuffer(r.raw((L + 7) // 8, "message bits"), dtype=np.uint8)
        message = np.unpackbits(packed)[:L].astype(np.uint8)
        decoder_res = r.u32("decoder res")
        msg = MessageState(message, decoder_mode="pretrain-frozen", decoder_res=decoder_res)
        for name, t in msg.named_arrays():
            t.data = r.f32_array(t.data.shape, name)
        msg.freeze()
        qdl = QuantizationDistortion(d, mode="eval-round")
        for name, t in qdl.named_arrays():
            t.data = r.f32_array(t.data.shape, name)
        qdl.q0 = float(r.f32_array((1,), "base step")[0])
        watermark = WatermarkBundle(WatermarkFeature.from_array(Tensor(f_prime, requires_grad=True)), msg, qdl)
    r.done()
    anchors = AnchorSet(positions, features, log_scalings, offsets)
    return anchors, heads, watermark


def save_scene(path, anchors, heads, watermark=None):
    blob = serialize_scene(anchors, heads, watermark)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_scene(path):
    with open(path, "rb") as fh:
        return deserialize_scene(fh.read())
