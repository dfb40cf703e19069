"""Quantization, adaptive arithmetic coding and the ``SWFP`` feature packet.

Symbols of ``b`` bits are coded most-significant bit first. Each prefix of
the symbol selects one adaptive binary context (a node of a binary tree
with ``2**b - 1`` nodes) holding Krichevsky-Trofimov counts, and the bit is
coded with a 32-bit integer arithmetic coder. The tree is equivalent to an
adaptive model over the full alphabet in which nearby symbol values share
statistics, which keeps the learning cost low for wide alphabets.

Packet layout (little-endian)::

    magic "SWFP" | version u8 | split_point u8 | ratio u8 | quant_bits u8
    | min f32 | max f32 | shape 3 x u16 | payload_length u32 | payload

The payload is the arithmetic-coded bit stream followed by a CRC-32 of the
symbol stream (symbols as little-endian u16), used to reject corrupt or
truncated packets.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numba import njit

MAGIC = b"SWFP"
VERSION = 1
HEADER = struct.Struct("<4sBBBBff3HI")
DEFAULT_BITS = 12
MAX_BITS = 16

_MASK = (1 << 32) - 1
_TOP = 1 << 31
_SECOND = 1 << 30
_HALF_MASK = _MASK >> 1
# Counts are halved past this total so frequencies stay far below the
# coder's minimum range of 2**30.
_COUNT_LIMIT = 1 << 24


class CodecError(ValueError):
    """Malformed, truncated or corrupt packet data."""


@dataclass
class QuantizedTensor:
    symbols: np.ndarray  # flat int64, values in [0, 2**bits)
    bits: int
    min_value: float
    max_value: float
    shape: tuple

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64).reshape(-1)
        self.shape = tuple(int(s) for s in self.shape)
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in 1..{MAX_BITS}, got {self.bits}")
        if self.symbols.size != math.prod(self.shape):
            raise ValueError(f"{self.symbols.size} symbols for shape {self.shape}")
        if self.max_value < self.min_value:
            raise ValueError("max_value < min_value")
        if self.symbols.size and (self.symbols.min() < 0 or self.symbols.max() >= 1 << self.bits):
            raise ValueError(f"symbols out of range for {self.bits} bits")


# ---- quantization ---------------------------------------------------------


def _f32_down(v: float) -> float:
    r = np.float32(v)
    if float(r) > v:
        r = np.nextafter(r, np.float32(-np.inf))
    return float(r)


def _f32_up(v: float) -> float:
    r = np.float32(v)
    if float(r) < v:
        r = np.nextafter(r, np.float32(np.inf))
    return float(r)


def _wire_range(lo: float, hi: float) -> tuple[float, float]:
    """Float32 bounds that enclose ``[lo, hi]``; the header stores them as f32."""
    if lo == hi:
        v = float(np.float32(lo))
        return v, v
    lo32, hi32 = _f32_down(lo), _f32_up(hi)
    if not (math.isfinite(lo32) and math.isfinite(hi32)):
        raise ValueError("tensor values exceed the float32 range of the packet header")
    return lo32, hi32


def _quantize_with(x, lo, hi, levels):
    scale = levels / (hi - lo)
    return np.clip(np.rint((x - lo) * scale), 0, levels)


def quantize(x, bits: int = DEFAULT_BITS) -> QuantizedTensor:
    """Uniform per-tensor quantization onto ``2**bits`` levels."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in 1..{MAX_BITS}, got {bits}")
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = _wire_range(float(x.min()), float(x.max()))
    levels = (1 << bits) - 1
    if lo == hi:
        symbols = np.zeros(x.size, dtype=np.int64)
    else:
        symbols = _quantize_with(x.reshape(-1), lo, hi, levels).astype(np.int64)
    return QuantizedTensor(symbols, bits, lo, hi, x.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.min_value == q.max_value:
        return np.full(q.shape, q.min_value)
    step = (q.max_value - q.min_value) / ((1 << q.bits) - 1)
    return (q.min_value + q.symbols * step).reshape(q.shape)


def roundtrip_batch(h: np.ndarray, bits: int) -> np.ndarray:
    """``dequantize(quantize(h[i]))`` for every sample of a batch, vectorized.

    Produces exactly what a receiver decodes from each sample's packet.
    """
    n = h.shape[0]
    flat = h.reshape(n, -1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot quantize non-finite values")
    levels = (1 << bits) - 1
    bounds = np.array([_wire_range(float(a), float(b))
                       for a, b in zip(flat.min(axis=1), flat.max(axis=1))])
    lo, hi = bounds[:, :1], bounds[:, 1:]
    const = (lo == hi)[:, 0]
    out = np.empty_like(flat)
    if np.any(~const):
        l, u = lo[~const], hi[~const]
        s = _quantize_with(flat[~const], l, u, levels)
        out[~const] = l + s * ((u - l) / levels)
    out[const] = lo[const]
    return out.reshape(h.shape)


# ---- arithmetic coder -----------------------------------------------------


@njit(cache=True)
def _put_bit(buf, state, bit):
    # state: [byte index, bit count in current byte]
    if bit:
        buf[state[0]] |= np.uint8(0x80 >> state[1])
    state[1] += 1
    if state[1] == 8:
        state[1] = 0
        state[0] += 1


@njit(cache=True)
def _encode_bits(symbols, bits, capacity):
    buf = np.zeros(capacity, dtype=np.uint8)
    st = np.zeros(2, dtype=np.int64)
    nodes = 1 << bits
    c0 = np.zeros(nodes, dtype=np.int64)
    c1 = np.zeros(nodes, dtype=np.int64)
    low = 0
    high = _MASK
    pending = 0
    for k in range(symbols.shape[0]):
        s = symbols[k]
        node = 1
        for i in range(bits - 1, -1, -1):
            bit = (s >> i) & 1
            f0 = 2 * c0[node] + 1
            total = f0 + 2 * c1[node] + 1
            rng = high - low + 1
            split = low + rng * f0 // total
            if bit == 0:
                high = split - 1
                c0[node] += 1
            else:
                low = split
                c1[node] += 1
            if c0[node] + c1[node] > _COUNT_LIMIT:
                c0[node] //= 2
                c1[node] //= 2
            while ((low ^ high) & _TOP) == 0:
                out = low >> 31
                _put_bit(buf, st, out)
                for _ in range(pending):
                    _put_bit(buf, st, out ^ 1)
                pending = 0
                low = (low << 1) & _MASK
                high = ((high << 1) & _MASK) | 1
            while (low & ~high & _SECOND) != 0:
                pending += 1
                low = (low << 1) & _HALF_MASK
                high = ((high << 1) & _HALF_MASK) | _TOP | 1
            node = 2 * node + bit
    # A single 1 bit terminates the stream; the decoder reads zeros past the end.
    _put_bit(buf, st, 1)
    n = st[0] + (1 if st[1] else 0)
    return buf[:n]


@njit(cache=True)
def _get_bit(data, pos):
    byte = pos >> 3
    if byte >= data.shape[0]:
        return 0
    return (data[byte] >> (7 - (pos & 7))) & 1


@njit(cache=True)
def _decode_bits(data, n, bits):
    out = np.empty(n, dtype=np.int64)
    nodes = 1 << bits
    c0 = np.zeros(nodes, dtype=np.int64)
    c1 = np.zeros(nodes, dtype=np.int64)
    low = 0
    high = _MASK
    code = 0
    pos = 0
    for _ in range(32):
        code = (code << 1) | _get_bit(data, pos)
        pos += 1
    for k in range(n):
        node = 1
        for i in range(bits):
            f0 = 2 * c0[node] + 1
            total = f0 + 2 * c1[node] + 1
            rng = high - low + 1
            split = low + rng * f0 // total
            if code < split:
                bit = 0
                high = split - 1
                c0[node] += 1
            else:
                bit = 1
                low = split
                c1[node] += 1
            if c0[node] + c1[node] > _COUNT_LIMIT:
                c0[node] //= 2
                c1[node] //= 2
            while ((low ^ high) & _TOP) == 0:
                low = (low << 1) & _MASK
                high = ((high << 1) & _MASK) | 1
                code = ((code << 1) & _MASK) | _get_bit(data, pos)
                pos += 1
            while (low & ~high & _SECOND) != 0:
                low = (low << 1) & _HALF_MASK
                high = ((high << 1) & _HALF_MASK) | _TOP | 1
                code = (code & _TOP) | ((code << 1) & _HALF_MASK) | _get_bit(data, pos)
                pos += 1
            node = 2 * node + bit
        out[k] = node - nodes
    return out


def _checksum(symbols: np.ndarray) -> int:
    return zlib.crc32(symbols.astype("<u2").tobytes())


def entropy_encode(q: QuantizedTensor) -> bytes:
    """Arithmetic-code ``q.symbols``; the CRC-32 trailer is part of the payload."""
    n = q.symbols.size
    capacity = (n * q.bits * 17) // 8 + 64
    stream = _encode_bits(q.symbols, q.bits, capacity)
    return stream.tobytes() + struct.pack("<I", _checksum(q.symbols))


def entropy_decode(payload: bytes, header: "PacketHeader") -> QuantizedTensor:
    """Exact inverse of :func:`entropy_encode` given the packet header."""
    if not 1 <= header.quant_bits <= MAX_BITS:
        raise CodecError(f"invalid quant_bits {header.quant_bits}")
    if len(payload) != header.payload_length:
        raise CodecError(
            f"payload is {len(payload)} bytes, header says {header.payload_length}"
        )
    if len(payload) < 5:
        raise CodecError("payload too short")
    n = math.prod(header.shape)
    if n == 0:
        raise CodecError("packet shape has no elements")
    (crc,) = struct.unpack("<I", payload[-4:])
    stream = np.frombuffer(payload[:-4], dtype=np.uint8)
    symbols = _decode_bits(stream, n, header.quant_bits)
    if _checksum(symbols) != crc:
        raise CodecError("checksum mismatch: payload is corrupt or header does not match")
    return QuantizedTensor(symbols, header.quant_bits, header.min_value, header.max_value,
                           header.shape)


# ---- packet ---------------------------------------------------------------


@dataclass
class PacketHeader:
    split_point: int
    ratio: int
    quant_bits: int
    min_value: float
    max_value: float
    shape: tuple
    payload_length: int
    version: int = VERSION

    def pack(self) -> bytes:
        if len(self.shape) != 3:
            raise ValueError(f"packet shape must be [C, H, W], got {self.shape}")
        return HEADER.pack(MAGIC, self.version, self.split_point, self.ratio, self.quant_bits,
                           self.min_value, self.max_value, *self.shape, self.payload_length)

    @classmethod
    def unpack(cls, data: bytes) -> "PacketHeader":
        if len(data) < HEADER.size:
            raise CodecError(f"packet shorter than its {HEADER.size}-byte header")
        magic, version, l, ratio, bits, lo, hi, c, h, w, plen = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported packet version {version}")
        return cls(l, ratio, bits, lo, hi, (c, h, w), plen, version)


@dataclass
class FeaturePacket:
    header: PacketHeader
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeaturePacket":
        header = PacketHeader.unpack(data)
        payload = data[HEADER.size :]
        if len(payload) != header.payload_length:
            raise CodecError(
                f"packet carries {len(payload)} payload bytes, header says {header.payload_length}"
            )
        return cls(header, payload)

    @property
    def size(self) -> int:
        return HEADER.size + len(self.payload)


def encode_tensor(x, split_point: int, ratio: int, bits: int = DEFAULT_BITS) -> FeaturePacket:
    """Quantize and entropy-code one ``[C', H, W]`` intermediate tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a [C, H, W] tensor, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("cannot packetize an empty tensor")
    if max(x.shape) > 0xFFFF:
        raise ValueError(f"extent exceeds u16 in shape {x.shape}")
    q = quantize(x, bits)
    payload = entropy_encode(q)
    header = PacketHeader(split_point, ratio, bits, q.min_value, q.max_value, x.shape,
                          len(payload))
    return FeaturePacket(header, payload)


def decode_packet(packet: FeaturePacket) -> np.ndarray:
    return dequantize(entropy_decode(packet.payload, packet.header))


# ---- measurements ---------------------------------------------------------


def empirical_entropy(symbols) -> float:
    """Order-0 empirical entropy in bits per symbol."""
    symbols = np.asarray(symbols).reshape(-1)
    if symbols.size == 0:
        raise ValueError("empty symbol sequence")
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return max(0.0, float(-(p * np.log2(p)).sum()))


def total_compression_ratio(ratio: float, bits_per_element: float) -> float:
    """Channel-pruning ratio times the float32-to-coded-bits gain."""
    if not bits_per_element > 0:
        raise ValueError("bits_per_element must be > 0")
    return ratio * 32 / bits_per_element
