"""kittykv: CPU reference implementation of mixed-precision 2-bit KV-cache
quantization with dynamic channel-wise precision boost."""

from ._version import __version__
from .analysis import (
    MemoryReport,
    SensitivityReport,
    SweepRow,
    attention_mse,
    boost_sweep,
    boost_sweep_experiment,
    channel_sensitivity,
    measure_cache_bytes,
    memory_report,
)
from .cache import AttentionOutput, KittyCacheState, oracle_attend
from .config import KittyConfig, config_from_mapping, read_config_file
from .errors import (
    BadMagicError,
    ConfigError,
    KittyError,
    NonFiniteError,
    PageFormatError,
    TensorIOError,
    TruncatedFileError,
    UnknownDtypeError,
)
from .pages import (
    SENTINEL,
    PageByteCounts,
    QuantizedKeyPage,
    QuantizedValuePage,
    dequantize_key_page,
    dequantize_value_page,
    deserialize_page,
    pack_key_page,
    pack_value_page,
    page_byte_size,
    serialize_page,
)
from .quant import (
    PASSTHROUGH_BITS,
    BoostSelection,
    QuantParams,
    boost_count,
    channel_scores,
    dequantize_values,
    fake_quantize_matrix,
    quantize_values,
    select_boost,
)
from .tensor_io import (
    PRNG_ID,
    SyntheticSpec,
    as_head_matrix,
    generate_synthetic,
    read_tensor,
    write_tensor,
)

__all__ = [
    "__version__",
    "AttentionOutput",
    "BadMagicError",
    "BoostSelection",
    "ConfigError",
    "KittyCacheState",
    "KittyConfig",
    "KittyError",
    "MemoryReport",
    "NonFiniteError",
    "PageByteCounts",
    "PageFormatError",
    "PASSTHROUGH_BITS",
    "PRNG_ID",
    "QuantParams",
    "QuantizedKeyPage",
    "QuantizedValuePage",
    "SENTINEL",
    "SensitivityReport",
    "SweepRow",
    "SyntheticSpec",
    "TensorIOError",
    "TruncatedFileError",
    "UnknownDtypeError",
    "as_head_matrix",
    "attention_mse",
    "boost_count",
    "boost_sweep",
    "boost_sweep_experiment",
    "channel_scores",
    "channel_sensitivity",
    "config_from_mapping",
    "dequantize_key_page",
    "dequantize_value_page",
    "dequantize_values",
    "deserialize_page",
    "fake_quantize_matrix",
    "generate_synthetic",
    "measure_cache_bytes",
    "memory_report",
    "oracle_attend",
    "pack_key_page",
    "pack_value_page",
    "page_byte_size",
    "quantize_values",
    "read_config_file",
    "read_tensor",
    "select_boost",
    "serialize_page",
    "write_tensor",
]
