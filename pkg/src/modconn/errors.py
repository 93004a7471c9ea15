"""Exception types raised across the package."""


class ModconnError(Exception):
    """Base class for all package errors."""


class ShapeError(ModconnError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateBatchError(ModconnError, ValueError):
    """Batch statistics cannot be estimated from fewer than two values per channel."""


class AdapterError(ModconnError, ValueError):
    """A producer tensor cannot be adapted to a consumer's input shape."""


class ConfigError(ModconnError, ValueError):
    """Invalid architecture, schedule or experiment configuration."""


class NumericError(ModconnError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class ContractViolation(ModconnError, RuntimeError):
    """An internal invariant was broken (e.g. an aggregation with no active input)."""


class CifarFormatError(ModconnError, ValueError):
    """A CIFAR binary file is truncated or malformed."""
