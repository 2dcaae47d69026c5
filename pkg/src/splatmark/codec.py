"""Compression of trained scenes: per-anchor quantization of watermarked
features, adaptive order-0 arithmetic coding of the quantized symbols, and
16-bit storage of geometry. The learned steps q travel as side info because
they derive from the unquantized features and would otherwise be undecodable.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ._binio import FormatError, Reader, Writer
from .scene import AnchorSet, AttributeHeads
from .watermark import (
    MessageState,
    QuantizationDistortion,
    round_half_away,
)

SPC_MAGIC = b"SPLC"
SPC_VERSION = 1
SYMBOL_RANGE = 32  # model covers [-S, S] plus escape
MODEL_INCREMENT = 32
MODEL_RESCALE = 1 << 16
_STATE_BITS = 32
_ESCAPE_BITS = 32


# ---------------------------------------------------------------------------
# adaptive order-0 arithmetic coding


class ArithmeticModel:
    """Adaptive frequency table over [-S, S] plus a trailing escape symbol."""

    def __init__(self, symbol_range: int = SYMBOL_RANGE):
        self.S = symbol_range
        self.n_symbols = 2 * symbol_range + 2  # values plus escape
        self.freqs = np.ones(self.n_symbols, dtype=np.int64)

    @property
    def escape_index(self) -> int:
        return self.n_symbols - 1

    def index_of(self, value: int) -> int:
        return value + self.S

    def value_of(self, index: int) -> int:
        return index - self.S

    def cumulative(self) -> np.ndarray:
        c = np.zeros(self.n_symbols + 1, dtype=np.int64)
        np.cumsum(self.freqs, out=c[1:])
        return c

    def update(self, index: int):
        self.freqs[index] += MODEL_INCREMENT
        if int(self.freqs.sum()) >= MODEL_RESCALE:
            self.freqs = np.maximum(self.freqs // 2, 1)


class _BitWriter:
    def __init__(self):
        self.bytes = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, bit: int):
        self.acc = (self.acc << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.bytes.append(self.acc)
            self.acc = 0
            self.nbits = 0

    def finish(self) -> bytes:
        if self.nbits:
            self.bytes.append(self.acc << (8 - self.nbits))
        return bytes(self.bytes)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self) -> int:
        byte_i, bit_i = divmod(self.pos, 8)
        self.pos += 1
        if byte_i >= len(self.data):
            return 0  # decoder may read past the end while flushing
        return (self.data[byte_i] >> (7 - bit_i)) & 1


class _CoderState:
    FULL = (1 << _STATE_BITS) - 1
    HALF = 1 << (_STATE_BITS - 1)
    QUARTER = 1 << (_STATE_BITS - 2)

    def __init__(self):
        self.low = 0
        self.high = self.FULL


class _Encoder(_CoderState):
    def __init__(self):
        super().__init__()
        self.out = _BitWriter()
        self.pending = 0

    def _emit(self, bit: int):
        self.out.write(bit)
        while self.pending:
            self.out.write(bit ^ 1)
            self.pending -= 1

    def encode(self, cum_lo: int, cum_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + span * cum_hi // total - 1
        self.low = self.low + span * cum_lo // total
        while True:
            if self.high < self.HALF:
                self._emit(0)
            elif self.low >= self.HALF:
                self._emit(1)
                self.low -= self.HALF
                self.high -= self.HALF
            elif self.low >= self.QUARTER and self.high < 3 * self.QUARTER:
                self.pending += 1
                self.low -= self.QUARTER
                self.high -= self.QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1

    def finish(self) -> bytes:
        self.pending += 1
        if self.low < self.QUARTER:
            self._emit(0)
        else:
            self._emit(1)
        return self.out.finish()


class _Decoder(_CoderState):
    def __init__(self, data: bytes):
        super().__init__()
        self.inp = _BitReader(data)
        self.code = 0
        for _ in range(_STATE_BITS):
            self.code = (self.code << 1) | self.inp.read()

    def decode_target(self, total: int) -> int:
        span = self.high - self.low + 1
        return ((self.code - self.low + 1) * total - 1) // span

    def advance(self, cum_lo: int, cum_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + span * cum_hi // total - 1
        self.low = self.low + span * cum_lo // total
        while True:
            if self.high < self.HALF:
                pass
            elif self.low >= self.HALF:
                self.low -= self.HALF
                self.high -= self.HALF
                self.code -= self.HALF
            elif self.low >= self.QUARTER and self.high < 3 * self.QUARTER:
                self.low -= self.QUARTER
                self.high -= self.QUARTER
                self.code -= self.QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self.inp.read()


def arithmetic_encode(symbols, symbol_range: int = SYMBOL_RANGE) -> bytes:
    """Losslessly code an integer sequence; out-of-range values escape to raw bits."""
    symbols = np.asarray(symbols, dtype=np.int64)
    model = ArithmeticModel(symbol_range)
    enc = _Encoder()
    for value in symbols:
        v = int(value)
        cum = model.cumulative()
        total = int(cum[-1])
        if -model.S <= v <= model.S:
            idx = model.index_of(v)
            enc.encode(int(cum[idx]), int(cum[idx + 1]), total)
            model.update(idx)
        else:
            idx = model.escape_index
            enc.encode(int(cum[idx]), int(cum[idx + 1]), total)
            model.update(idx)
            raw = v + (1 << (_ESCAPE_BITS - 1))
            if not 0 <= raw < (1 << _ESCAPE_BITS):
                raise ValueError(f"symbol {v} exceeds the escape range")
            for b in range(_ESCAPE_BITS - 1, -1, -1):
                bit = (raw >> b) & 1
                enc.encode(bit, bit + 1, 2)
    payload = enc.finish()
    return payload


def arithmetic_decode(data: bytes, count: int, symbol_range: int = SYMBOL_RANGE) -> np.ndarray:
    """Inverse of arithmetic_encode for a known symbol count."""
    model = ArithmeticModel(symbol_range)
    dec = _Decoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cum = model.cumulative()
        total = int(cum[-1])
        target = dec.decode_target(total)
        idx = int(np.searchsorted(cum, target, side="right") - 1)
        dec.advance(int(cum[idx]), int(cum[idx + 1]), total)
        model.update(idx)
        if idx == model.escape_index:
            raw = 0
            for _ in range(_ESCAPE_BITS):
                bit = dec.decode_target(2)
                bit = 1 if bit >= 1 else 0
                dec.advance(bit, bit + 1, 2)
                raw = (raw << 1) | bit
            out[i] = raw - (1 << (_ESCAPE_BITS - 1))
        else:
            out[i] = model.value_of(idx)
    return out


def empirical_entropy_bits(symbols) -> float:
    """Order-0 entropy of the sequence in bits."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return 0.0
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(-(p * np.log2(p)).sum() * symbols.size)


# ---------------------------------------------------------------------------
# .spc container


@dataclass
class CompressedScene:
    data: bytes
    breakdown: dict

    @property
    def size_bytes(self) -> int:
        return len(self.data)


@dataclass
class DecompressedScene:
    anchors: AnchorSet
    heads: AttributeHeads
    message_state: MessageState | None
    quant_steps: np.ndarray
    symbols: np.ndarray


def compress(
    anchors: AnchorSet,
    heads: AttributeHeads,
    f_prime=None,
    qdl: QuantizationDistortion | None = None,
    message_state: MessageState | None = None,
    q0: float = 1.0,
) -> CompressedScene:
    """Quantize watermarked features with the learned steps and entropy-code them."""
    f = anchors.features.data
    if f_prime is not None:
        fp = f_prime.data if hasattr(f_prime, "data") else np.asarray(f_prime)
        f_w = f + np.tanh(fp)
    else:
        f_w = f.copy()
    if qdl is not None:
        q = qdl.step_sizes_np(f_w)
    else:
        q = np.full(f_w.shape[0], q0)
    # float16 side info is what the decoder will actually use; quantize
    # against the stored values so the round trip error stays within q/2
    q = q.astype("<f2").astype(np.float64)
    q = np.maximum(q, 2.0 ** -14)
    symbols = round_half_away(f_w / q[:, None]).astype(np.int64).reshape(-1)
    payload = arithmetic_encode(symbols)

    N, d = f.shape
    K = anchors.offsets_per_anchor
    L = message_state.length if message_state is not None else 0

    w = Writer()
    w.raw(SPC_MAGIC)
    w.u32(SPC_VERSION)
    w.u32(N)
    w.u32(d)
    w.u32(K)
    w.u32(L)
    w.u32(heads.hidden)
    header_end = w.size
    w.f16_array(q)
    q_end = w.size
    w.f16_array(anchors.positions.data)
    w.f16_array(anchors.log_scalings.data)
    w.f16_array(anchors.offsets.data)
    geom_end = w.size
    for _, t in heads.named_arrays():
        w.f32_array(t.data)
    heads_end = w.size
    if message_state is not None:
        w.raw(np.packbits(message_state.message).tobytes())
        w.u32(message_state.decoder_res)
        for _, t in message_state.named_arrays():
            w.f32_array(t.data)
    wm_end = w.size
    w.u32(symbols.size)
    w.u32(len(payload))
    w.raw(payload)
    feat_end = w.size
    body = w.getvalue()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    blob = body + crc.to_bytes(4, "little")
    breakdown = {
        "header": header_end,
        "quant_steps": q_end - header_end,
        "geometry": geom_end - q_end,
        "heads": heads_end - geom_end,
        "watermark": wm_end - heads_end,
        "features_payload": feat_end - wm_end,
        "checksum": 4,
        "total": len(blob),
        "symbol_entropy_bits": empirical_entropy_bits(symbols),
    }
    return CompressedScene(blob, breakdown)


def decompress(blob: bytes) -> DecompressedScene:
    """Rebuild a renderable scene; features become q * symbols directly."""
    if len(blob) < 4:
        raise FormatError("truncated container at offset 0")
    body, stored = blob[:-4], blob[-4:]
    crc = zlib.crc32(body) & 0xFFFFFFFF
    if stored != crc.to_bytes(4, "little"):
        raise FormatError(f"checksum mismatch at offset {len(blob) - 4}")
    r = Reader(body)
    r.expect_magic(SPC_MAGIC, "compressed scene")
    version = r.u32("version")
    if version != SPC_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    N = r.u32("anchor count")
    d = r.u32("feature dim")
    K = r.u32("offsets per anchor")
    L = r.u32("message length")
    hidden = r.u32("head width")
    q = r.f16_array((N,), "quantization steps")
    positions = r.f16_array((N, 3), "positions")
    log_scalings = r.f16_array((N, 3), "log scalings")
    offsets = r.f16_array((N, K, 3), "offsets")
    heads = AttributeHeads(d, K, hidden=hidden)
    for name, t in heads.named_arrays():
        t.data = r.f32_array(t.data.shape, name)
    message_state = None
    if L:
        packed = np.frombuffer(r.raw((L + 7) // 8, "message bits"), dtype=np.uint8)
        message = np.unpackbits(packed)[:L].astype(np.uint8)
        decoder_res = r.u32("decoder res")
        message_state = MessageState(message, decoder_mode="pretrain-frozen", decoder_res=decoder_res)
        for name, t in message_state.named_arrays():
            t.data = r.f32_array(t.data.shape, name)
        message_state.freeze()
    n_symbols = r.u32("symbol count")
    if n_symbols != N * d:
        raise FormatError(f"symbol count {n_symbols} != N*d at offset {r.pos - 4}")
    payload_len = r.u32("payload length")
    payload = r.raw(payload_len, "feature payload")
    r.done()
    symbols = arithmetic_decode(payload, n_symbols)
    features = symbols.reshape(N, d) * q[:, None]
    anchors = AnchorSet(positions, features, log_scalings, offsets)
    return DecompressedScene(anchors, heads, message_state, q, symbols)
