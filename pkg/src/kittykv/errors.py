"""Exception types shared across the package."""


class KittyError(ValueError):
    """Base class for all kittykv errors."""


class ConfigError(KittyError):
    """Invalid cache configuration."""


class TensorIOError(KittyError):
    """Base class for tensor-file format errors."""


class BadMagicError(TensorIOError):
    """File does not start with the expected magic bytes."""


class UnknownDtypeError(TensorIOError):
    """Dtype code in the header is not defined by the format."""


class TruncatedFileError(TensorIOError):
    """File ends before the declared payload is complete."""


class NonFiniteError(TensorIOError):
    """Tensor contains NaN or infinite elements."""


class PageFormatError(KittyError):
    """Malformed quantized page (bad sentinel pattern, size mismatch, ...)."""
