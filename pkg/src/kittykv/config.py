"""Cache configuration and the flat key = value config-file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .quant import PASSTHROUGH_BITS, boost_count

_ALLOWED_BITS = (2, PASSTHROUGH_BITS)
_HEURISTICS = ("magnitude", "random")


@dataclass(frozen=True)
class KittyConfig:
    """Shape and policy of one cache: sink/local/group sizes, head counts,
    bit widths and the boost policy.

    ``key_bits`` / ``value_bits`` of 16 select the full-precision
    pass-through pipeline (same state machine, identity codec).
    """

    s: int = 32  # sink tokens kept in full precision
    r: int = 128  # local window of recent value tokens
    g: int = 128  # quantization group = page size, in tokens
    d: int = 128  # head size (channels)
    h_kv: int = 1
    h_q: int = 1
    key_bits: int = 2
    value_bits: int = 2
    boost_fraction: float = 0.125
    heuristic: str = "magnitude"
    heuristic_seed: int = 0

    def __post_init__(self):
        if self.s < 0:
            raise ConfigError("sink size s must be >= 0")
        if self.r < 1:
            raise ConfigError("local window r must be >= 1")
        if self.g < 1 or self.g % 4 != 0:
            raise ConfigError("group size g must be a positive multiple of 4")
        if self.d < 1 or self.d % 4 != 0:
            raise ConfigError("head size d must be a positive multiple of 4")
        if self.h_kv < 1 or self.h_q < 1 or self.h_q % self.h_kv != 0:
            raise ConfigError("h_q must be a positive multiple of h_kv")
        if self.key_bits not in _ALLOWED_BITS or self.value_bits not in _ALLOWED_BITS:
            raise ConfigError(f"key/value bits must be in {_ALLOWED_BITS}")
        if not 0.0 <= self.boost_fraction <= 1.0:
            raise ConfigError("boost_fraction must lie in [0, 1]")
        if self.heuristic not in _HEURISTICS:
            raise ConfigError(f"heuristic must be one of {_HEURISTICS}")
        if self.d_boost > 255:
            raise ConfigError("d_boost exceeds the uint8 boost-index space")

    @property
    def d_boost(self) -> int:
        return boost_count(self.boost_fraction, self.d)

    @property
    def group_size(self) -> int:
        """Query heads sharing one KV head."""
        return self.h_q // self.h_kv

    def kv_head_of(self, query_head: int) -> int:
        return query_head * self.h_kv // self.h_q

    def as_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(KittyConfig)}


_FIELD_TYPES = {f.name: f.type for f in fields(KittyConfig)}


def config_from_mapping(mapping: dict, base: KittyConfig | None = None) -> KittyConfig:
    """Build a config from string or typed values, starting from ``base``."""
    base = base if base is not None else KittyConfig()
    updates = {}
    for key, value in mapping.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and key != "heuristic":
            try:
                value = float(value) if key == "boost_fraction" else int(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        updates[key] = value
    return replace(base, **updates)


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
    return mapping
