"""Scalar quantization math: asymmetric uniform quantizers, channel scoring,
and top-K boost selection.

All quantizers follow the same law.  For a group of values with minimum
``mn`` and maximum ``mx`` at ``b`` bits:

    scale      = (mx - mn) / (2^b - 1)
    zero_point = mn
    code       = clamp(round_half_even((x - zero_point) / scale), 0, 2^b - 1)
    dequant    = code * scale + zero_point

Degenerate constant groups use scale = 0 and all-zero codes, so they
reconstruct exactly.  All arithmetic is float32 end to end, which is what
makes the packed page path and the lane-by-lane path bit-identical.

A bit width of 16 is a reserved pass-through: the lane is returned verbatim,
so full-precision baselines and mixed-width variants share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KittyError

PASSTHROUGH_BITS = 16
QUANT_BITS = (2, 4)


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point pair for one quantization group."""

    bits: int
    scale: float
    zero_point: float


@dataclass(frozen=True)
class BoostSelection:
    """Sorted channel indices promoted to the higher bit width."""

    boosted: np.ndarray  # int64, ascending
    d_boost: int

    def __post_init__(self):
        idx = np.asarray(self.boosted, dtype=np.int64)
        if idx.ndim != 1 or len(idx) != self.d_boost:
            raise KittyError("boosted index list does not match d_boost")
        if len(idx) and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise KittyError("boosted indices must be unique and ascending")
        object.__setattr__(self, "boosted", idx)


def boost_count(boost_fraction: float, channels: int) -> int:
    """Number of boosted channels: round-half-even of fraction * channels."""
    if not 0.0 <= boost_fraction <= 1.0:
        raise KittyError(f"boost_fraction {boost_fraction} outside [0, 1]")
    return int(round(boost_fraction * channels))


def channel_scores(x: np.ndarray) -> np.ndarray:
    """Per-channel importance: mean absolute value over tokens.

    ``x`` is (tokens, channels); returns a float64 vector of length channels.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise KittyError("scores need a (tokens, channels) matrix with tokens >= 1")
    return np.mean(np.abs(x), axis=0, dtype=np.float64)


def select_boost(
    scores: np.ndarray,
    boost_fraction: float,
    heuristic: str = "magnitude",
    seed=None,
) -> BoostSelection:
    """Pick the channels to promote to the higher bit width.

    ``magnitude`` takes the top-K by score, ties broken by lower channel
    index.  ``random`` ignores the scores and samples K channels without
    replacement from the seeded generator (``seed`` may be an int or a
    ``numpy.random.Generator``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    d = len(scores)
    k = boost_count(boost_fraction, d)
    if heuristic == "magnitude":
        # stable argsort on the negated scores: descending score, ties by index
        order = np.argsort(-scores, kind="stable")[:k]
    elif heuristic == "random":
        rng = np.random.default_rng(seed)
        order = rng.choice(d, size=k, replace=False)
    else:
        raise KittyError(f"unknown selection heuristic {heuristic!r}")
    return BoostSelection(boosted=np.sort(order), d_boost=k)


def _quantize_columns(x: np.ndarray, qmax) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize each column of float32 ``x`` independently.

    ``qmax`` is a scalar or per-column array of grid maxima (3 or 15).
    Returns (codes uint8, scale float32, zero_point float32); constant
    columns get scale 0 and all-zero codes.
    """
    mn = x.min(axis=0)
    mx = x.max(axis=0)
    qmax = np.asarray(qmax, dtype=np.float32)
    scale = (mx - mn) / qmax
    safe = np.where(scale > 0, scale, np.float32(1.0))
    codes = np.clip(np.rint((x - mn) / safe), 0, qmax).astype(np.uint8)
    codes[:, scale == 0] = 0
    return codes, scale, mn


def _dequantize_columns(codes: np.ndarray, scale: np.ndarray, zero: np.ndarray) -> np.ndarray:
    return codes.astype(np.float32) * scale + zero


def quantize_values(xs, bits: int) -> tuple[np.ndarray, QuantParams]:
    """Quantize one group of values at 2 or 4 bits."""
    if bits not in QUANT_BITS:
        raise KittyError(f"bits must be one of {QUANT_BITS}, got {bits}")
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim != 1 or xs.size == 0:
        raise KittyError("quantize_values needs a non-empty 1-D sequence")
    if not np.isfinite(xs).all():
        raise KittyError("quantize_values input must be finite")
    codes, scale, zero = _quantize_columns(xs[:, None], float(2**bits - 1))
    return codes[:, 0], QuantParams(bits=bits, scale=float(scale[0]), zero_point=float(zero[0]))


def dequantize_values(codes, params: QuantParams) -> np.ndarray:
    """Reconstruct a group of values: code * scale + zero_point."""
    codes = np.asarray(codes)
    qmax = 2**params.bits - 1
    if codes.size and (codes.min() < 0 or codes.max() > qmax):
        raise KittyError(f"code outside [0, {qmax}]")
    return codes.astype(np.float32) * np.float32(params.scale) + np.float32(params.zero_point)


def fake_quantize_matrix(x: np.ndarray, axis: str, bits_per_lane) -> np.ndarray:
    """Quantize-then-dequantize each lane of ``x`` at its own bit width.

    ``axis`` selects the lane orientation: ``per_channel`` treats columns as
    lanes (a channel's values across tokens share one scale), ``per_token``
    treats rows as lanes.  ``bits_per_lane`` holds one entry per lane from
    {2, 4, 16}; 16 passes the lane through untouched.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise KittyError("fake_quantize_matrix needs a 2-D matrix")
    if axis == "per_channel":
        lanes = x.shape[1]
    elif axis == "per_token":
        lanes = x.shape[0]
    else:
        raise KittyError(f"axis must be per_channel or per_token, got {axis!r}")
    bits = np.asarray(bits_per_lane, dtype=np.int64)
    if bits.shape != (lanes,):
        raise KittyError(f"need {lanes} lane widths, got shape {bits.shape}")
    if not np.isin(bits, QUANT_BITS + (PASSTHROUGH_BITS,)).all():
        raise KittyError("lane widths must be in {2, 4, 16}")

    cols = x if axis == "per_channel" else x.T
    out = cols.copy()
    for b in QUANT_BITS:
        sel = np.flatnonzero(bits == b)
        if len(sel) == 0:
            continue
        block = np.ascontiguousarray(cols[:, sel])
        codes, scale, zero = _quantize_columns(block, float(2**b - 1))
        out[:, sel] = _dequantize_columns(codes, scale, zero)
    return out if axis == "per_channel" else np.ascontiguousarray(out.T)
