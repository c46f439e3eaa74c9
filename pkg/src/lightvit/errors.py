"""Exception hierarchy shared by every module of the package."""


class LightViTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LightViTError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LightViTError, ValueError):
    """A configuration violates an architectural constraint."""


class ContractError(LightViTError, RuntimeError):
    """An operation was invoked outside its documented preconditions."""


class NumericError(LightViTError, ArithmeticError):
    """Non-finite values reached an operation that cannot handle them."""


class FormatError(LightViTError, ValueError):
    """A weight or tensor file is malformed."""


class ResolutionError(ConfigError):
    """An input resolution cannot be tiled by the model's stride and window sizes."""
