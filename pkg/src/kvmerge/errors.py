"""Exception types shared across the package."""


class KVMergeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(KVMergeError, ValueError):
    pass


class EmptySequence(KVMergeError, ValueError):
    pass


class IndexOutOfRange(KVMergeError, IndexError):
    pass


class DegenerateDirection(KVMergeError, ArithmeticError):
    """A direction vector (or induced-metric norm) is numerically zero."""


class DegenerateSystem(KVMergeError, ArithmeticError):
    """The rank-one merge system has no usable curvature (|gamma| <= eps)."""


class ConvergenceFailure(KVMergeError, RuntimeError):
    pass


class InsufficientLength(KVMergeError, ValueError):
    pass


class InsufficientPairs(KVMergeError, ValueError):
    pass


class ConfigError(KVMergeError, ValueError):
    """Invalid configuration value. ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TensorFormatError(KVMergeError, ValueError):
    pass


class BadMagic(TensorFormatError):
    pass


class BadVersion(TensorFormatError):
    pass
