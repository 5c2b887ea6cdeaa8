"""Bit-exact packing of quantized pages and their reconstruction.

A key page holds G tokens of one KV head, quantized per channel.  Channels
picked by a boost selection are quantized at 4 bits, the rest at 2 bits, and
the mixed-precision result is decomposed into two uniformly 2-bit tensors:

* ``dense_low``  -- the low two bits of every channel, shape (D, G/4) bytes
* ``high_bits``  -- the high two bits of boosted channels only, compacted to
  (d_boost, G/4) bytes
* ``boost_idx``  -- uint8 map from logical channel to its ``high_bits`` row;
  non-boosted channels carry the sentinel value 255

Bit order within a byte: token t of a channel lives in byte t // 4 at bit
offset 2 * (t % 4), i.e. unpacking walks the shift sequence [0, 2, 4, 6].
Value pages are the per-token analogue at a uniform 2 bits, packed along the
channel axis.

Pages are immutable once packed (their arrays are marked read-only) and safe
to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import KittyError, PageFormatError, TruncatedFileError, BadMagicError
from .quant import BoostSelection, _dequantize_columns, _quantize_columns

SENTINEL = 255  # boost_idx marker: channel kept at the base 2-bit width

PAGE_MAGIC = b"KTYP"
KIND_KEY = 0
KIND_VALUE = 1
_PAGE_HEADER = struct.Struct("<4sBHHH")  # magic, kind, d, g, d_boost

_SHIFTS = np.array([0, 2, 4, 6], dtype=np.uint8)


def _pack2(codes: np.ndarray) -> np.ndarray:
    """Pack 2-bit codes (n, m) with m % 4 == 0 into (n, m // 4) bytes."""
    c = codes.reshape(codes.shape[0], codes.shape[1] // 4, 4)
    return c[..., 0] | (c[..., 1] << 2) | (c[..., 2] << 4) | (c[..., 3] << 6)


def _unpack2(packed: np.ndarray) -> np.ndarray:
    """Inverse of _pack2: (n, m) bytes -> (n, 4 * m) codes in [0, 3]."""
    rep = np.repeat(packed, 4, axis=1)
    shifts = np.tile(_SHIFTS, packed.shape[1])
    return (rep >> shifts) & np.uint8(3)


def _freeze(*arrays):
    for a in arrays:
        a.flags.writeable = False


@dataclass(frozen=True)
class QuantizedKeyPage:
    d: int
    g: int
    d_boost: int
    dense_low: np.ndarray  # (d, g // 4) uint8
    high_bits: np.ndarray  # (d_boost, g // 4) uint8
    boost_idx: np.ndarray  # (d,) uint8, SENTINEL for non-boosted channels
    scales: np.ndarray  # (d,) float32
    zero_points: np.ndarray  # (d,) float32


@dataclass(frozen=True)
class QuantizedValuePage:
    g: int
    d: int
    codes: np.ndarray  # (g, d // 4) uint8
    scales: np.ndarray  # (g,) float32
    zero_points: np.ndarray  # (g,) float32


def pack_key_page(x: np.ndarray, sel: BoostSelection) -> QuantizedKeyPage:
    """Quantize and pack one (G, D) key page under the given boost selection."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise KittyError("key page must be a (G, D) matrix")
    g, d = x.shape
    if g % 4 != 0 or g == 0:
        raise KittyError(f"page token count {g} must be a positive multiple of 4")
    if not np.isfinite(x).all():
        raise KittyError("key page contains non-finite values")
    if len(sel.boosted) and sel.boosted[-1] >= d:
        raise KittyError("boost selection indexes a channel outside the page")
    if sel.d_boost > SENTINEL:
        raise KittyError(f"d_boost {sel.d_boost} exceeds the uint8 index space")

    boosted_mask = np.zeros(d, dtype=bool)
    boosted_mask[sel.boosted] = True
    qmax = np.where(boosted_mask, np.float32(15.0), np.float32(3.0))
    codes, scale, zero = _quantize_columns(x, qmax)
    codes = np.ascontiguousarray(codes.T)  # (D, G), channel-major like the layout

    dense_low = np.ascontiguousarray(_pack2(codes & np.uint8(3)))
    high_bits = np.ascontiguousarray(_pack2(codes[sel.boosted] >> np.uint8(2)))
    boost_idx = np.full(d, SENTINEL, dtype=np.uint8)
    boost_idx[sel.boosted] = np.arange(sel.d_boost, dtype=np.uint8)
    scale = np.ascontiguousarray(scale)
    zero = np.ascontiguousarray(zero)
    _freeze(dense_low, high_bits, boost_idx, scale, zero)
    return QuantizedKeyPage(
        d=d,
        g=g,
        d_boost=sel.d_boost,
        dense_low=dense_low,
        high_bits=high_bits,
        boost_idx=boost_idx,
        scales=scale,
        zero_points=zero,
    )


def dequantize_key_page(page: QuantizedKeyPage) -> np.ndarray:
    """Reconstruct a key page to (D, G) float32.

    Unpacks the dense low bits via shift-and-mask, gathers the compacted high
    bits through ``boost_idx`` where the boost mask is set, recombines
    ``low | (high << 2)``, and applies per-channel scale and zero-point.
    """
    boosted = page.boost_idx != SENTINEL
    if int(boosted.sum()) != page.d_boost:
        raise PageFormatError(
            f"boost_idx marks {int(boosted.sum())} channels, expected {page.d_boost}"
        )
    rows = page.boost_idx[boosted]
    if not np.array_equal(np.sort(rows), np.arange(page.d_boost, dtype=np.uint8)):
        raise PageFormatError("boost_idx is not a bijection onto the high-bit rows")

    x = _unpack2(page.dense_low)
    if page.d_boost:
        high = _unpack2(page.high_bits)
        x[boosted] |= high[rows] << np.uint8(2)
    scale = page.scales[:, None]
    zero = page.zero_points[:, None]
    return x.astype(np.float32) * scale + zero


def pack_value_page(v: np.ndarray) -> QuantizedValuePage:
    """Quantize and pack one (G, D) value page, per token at 2 bits."""
    v = np.ascontiguousarray(v, dtype=np.float32)
    if v.ndim != 2:
        raise KittyError("value page must be a (G, D) matrix")
    g, d = v.shape
    if d % 4 != 0 or d == 0:
        raise KittyError(f"channel count {d} must be a positive multiple of 4")
    if not np.isfinite(v).all():
        raise KittyError("value page contains non-finite values")

    codes, scale, zero = _quantize_columns(np.ascontiguousarray(v.T), np.float32(3.0))
    packed = np.ascontiguousarray(_pack2(codes.T))  # rows = tokens
    scale = np.ascontiguousarray(scale)
    zero = np.ascontiguousarray(zero)
    _freeze(packed, scale, zero)
    return QuantizedValuePage(g=g, d=d, codes=packed, scales=scale, zero_points=zero)


def dequantize_value_page(page: QuantizedValuePage) -> np.ndarray:
    """Reconstruct a value page to (G, D) float32."""
    codes = _unpack2(page.codes)
    return codes.astype(np.float32) * page.scales[:, None] + page.zero_points[:, None]


@dataclass(frozen=True)
class PageByteCounts:
    """Byte accounting for one page at the 16-bit metadata convention.

    ``payload`` covers the packed 2-bit code tensors, ``metadata`` the scales
    and zero-points at 2 bytes each, ``index`` the boost-index array at one
    byte per channel.
    """

    payload: int
    metadata: int
    index: int

    @property
    def total(self) -> int:
        return self.payload + self.metadata + self.index


def page_byte_size(kind: str, cfg) -> PageByteCounts:
    """Per-component byte counts of one page under ``cfg``.

    ``cfg`` needs ``d``, ``g`` and (for key pages) ``d_boost`` attributes;
    a :class:`~kittykv.config.KittyConfig` qualifies.
    """
    d, g = cfg.d, cfg.g
    if kind == "key":
        return PageByteCounts(
            payload=d * g // 4 + cfg.d_boost * g // 4,
            metadata=4 * d,
            index=d,
        )
    if kind == "value":
        return PageByteCounts(payload=g * d // 4, metadata=4 * g, index=0)
    raise KittyError(f"kind must be 'key' or 'value', got {kind!r}")


def serialize_page(page) -> bytes:
    """Encode a page to the KTYP wire format.

    Header: magic ``KTYP``, kind byte (0 = key, 1 = value), uint16 D, G and
    d_boost, little-endian.  Components follow in declaration order with no
    padding; scales and zero-points are stored as float16, so the body size
    equals :func:`page_byte_size` exactly.
    """
    if isinstance(page, QuantizedKeyPage):
        header = _PAGE_HEADER.pack(PAGE_MAGIC, KIND_KEY, page.d, page.g, page.d_boost)
        return b"".join(
            (
                header,
                page.dense_low.tobytes(),
                page.high_bits.tobytes(),
                page.boost_idx.tobytes(),
                page.scales.astype("<f2").tobytes(),
                page.zero_points.astype("<f2").tobytes(),
            )
        )
    if isinstance(page, QuantizedValuePage):
        header = _PAGE_HEADER.pack(PAGE_MAGIC, KIND_VALUE, page.d, page.g, 0)
        return b"".join(
            (
                header,
                page.codes.tobytes(),
                page.scales.astype("<f2").tobytes(),
                page.zero_points.astype("<f2").tobytes(),
            )
        )
    raise KittyError(f"cannot serialize {type(page).__name__}")


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise TruncatedFileError(f"page truncated in {what}")
    return buf[offset : offset + n], offset + n


def deserialize_page(raw: bytes):
    """Decode a KTYP byte string back into a page.

    Scales and zero-points come back as float32 promoted from the stored
    float16, matching the in-memory convention.
    """
    if len(raw) < len(PAGE_MAGIC) or raw[:4] != PAGE_MAGIC:
        raise BadMagicError(f"bad page magic {raw[:4]!r}")
    if len(raw) < _PAGE_HEADER.size:
        raise TruncatedFileError("page truncated in header")
    _, kind, d, g, d_boost = _PAGE_HEADER.unpack_from(raw)
    off = _PAGE_HEADER.size

    def _f16(buf, n):
        return np.frombuffer(buf, dtype="<f2", count=n).astype(np.float32)

    if kind == KIND_KEY:
        buf, off = _take(raw, off, d * g // 4, "dense_low")
        dense_low = np.frombuffer(buf, dtype=np.uint8).reshape(d, g // 4)
        buf, off = _take(raw, off, d_boost * g // 4, "high_bits")
        high_bits = np.frombuffer(buf, dtype=np.uint8).reshape(d_boost, g // 4)
        buf, off = _take(raw, off, d, "boost_idx")
        boost_idx = np.frombuffer(buf, dtype=np.uint8)
        buf, off = _take(raw, off, 2 * d, "scales")
        scales = _f16(buf, d)
        buf, off = _take(raw, off, 2 * d, "zero_points")
        zeros = _f16(buf, d)
        if off != len(raw):
            raise PageFormatError(f"{len(raw) - off} trailing bytes after key page")
        _freeze(scales, zeros)
        return QuantizedKeyPage(
            d=d, g=g, d_boost=d_boost, dense_low=dense_low,
            high_bits=high_bits, boost_idx=boost_idx,
            scales=scales, zero_points=zeros,
        )
    if kind == KIND_VALUE:
        buf, off = _take(raw, off, g * d // 4, "codes")
        codes = np.frombuffer(buf, dtype=np.uint8).reshape(g, d // 4)
        buf, off = _take(raw, off, 2 * g, "scales")
        scales = _f16(buf, g)
        buf, off = _take(raw, off, 2 * g, "zero_points")
        zeros = _f16(buf, g)
        if off != len(raw):
            raise PageFormatError(f"{len(raw) - off} trailing bytes after value page")
        _freeze(scales, zeros)
        return QuantizedValuePage(g=g, d=d, codes=codes, scales=scales, zero_points=zeros)
    raise PageFormatError(f"unknown page kind {kind}")
