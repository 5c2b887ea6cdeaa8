"""Binary tensor I/O and synthetic KV-tensor generation.

The package moves per-head activations around as dense 2-D float32 matrices
of shape (tokens, channels).  On disk they live in the KTY1 container:

    bytes 0-3   magic ``KTY1``
    byte  4     dtype code (0x00 = float32, the only defined code)
    byte  5     rank (must be 2)
    bytes 6-21  two uint64 dims: rows, cols (little-endian)
    remainder   rows * cols * 4 bytes of row-major float32 payload

No padding, no checksum.  Everything little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteError,
    TensorIOError,
    TruncatedFileError,
    UnknownDtypeError,
)

MAGIC = b"KTY1"
DTYPE_F32 = 0x00

_HEADER = struct.Struct("<4sBBQQ")

#: Identifier of the generator algorithm behind every seeded stream in this
#: package; echoed into report headers so results can be reproduced.
PRNG_ID = "pcg64"


def as_head_matrix(data, *, what: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a valid head matrix: 2-D, float32, finite, C-order."""
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise TensorIOError(f"{what} must be 2-D, got shape {m.shape}")
    if m.size and not np.isfinite(m).all():
        raise NonFiniteError(f"{what} contains non-finite elements")
    return m


def write_tensor(m: np.ndarray, path) -> None:
    """Write ``m`` to ``path`` in the KTY1 format."""
    m = as_head_matrix(m)
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, DTYPE_F32, 2, rows, cols))
        fh.write(m.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a KTY1 file back into a (rows, cols) float32 matrix."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC):
        raise TruncatedFileError(f"{path}: file shorter than the magic")
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, dtype_code, rank, rows, cols = _HEADER.unpack_from(raw)
    if dtype_code != DTYPE_F32:
        raise UnknownDtypeError(f"{path}: unknown dtype code {dtype_code:#04x}")
    if rank != 2:
        raise TensorIOError(f"{path}: unsupported rank {rank}")
    payload = raw[_HEADER.size :]
    expected = rows * cols * 4
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise TensorIOError(f"{path}: {len(payload) - expected} trailing bytes")
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if m.size and not np.isfinite(m).all():
        raise NonFiniteError(f"{path}: payload contains non-finite elements")
    # frombuffer aliases the read-only bytes object; hand back an owned copy
    return np.ascontiguousarray(m)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic KV tensor with a few high-magnitude channels.

    Channel ``j`` is drawn i.i.d. Gaussian(0, base_std^2), then multiplied by
    ``outlier_gain`` if ``j`` is listed in ``outlier_channels``.
    """

    tokens: int
    channels: int
    outlier_channels: tuple[int, ...] = field(default_factory=tuple)
    outlier_gain: float = 1.0
    base_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outlier_channels", tuple(self.outlier_channels))
        if self.tokens < 0 or self.channels < 0:
            raise TensorIOError("tokens and channels must be non-negative")
        if len(set(self.outlier_channels)) != len(self.outlier_channels):
            raise TensorIOError("outlier channel indices must be unique")
        if any(not 0 <= c < self.channels for c in self.outlier_channels):
            raise TensorIOError("outlier channel index out of range")
        if self.outlier_gain < 1.0:
            raise TensorIOError("outlier_gain must be >= 1.0")
        if not self.base_std > 0:
            raise TensorIOError("base_std must be positive")


def generate_synthetic(spec: SyntheticSpec) -> np.ndarray:
    """Deterministically generate the (tokens, channels) matrix for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    m = rng.normal(0.0, spec.base_std, size=(spec.tokens, spec.channels))
    if spec.outlier_channels:
        m[:, list(spec.outlier_channels)] *= spec.outlier_gain
    return m.astype(np.float32)
