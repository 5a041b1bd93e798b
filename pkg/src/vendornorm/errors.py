"""Exception hierarchy shared by every module."""


class VendorNormError(Exception):
    """Base class for toolkit errors."""


class ConfigError(VendorNormError, ValueError):
    """Invalid configuration or parameter choice."""


class DegenerateInputError(VendorNormError, ValueError):
    """Input data cannot support the requested computation."""


class ContractError(VendorNormError, ValueError):
    """A precondition on arguments (range, shape, size) was violated."""


class ShapeError(ContractError):
    """Spatial dimensions are incompatible with the network."""


class NumericError(VendorNormError, ArithmeticError):
    """A non-finite value appeared in a loss or parameter."""


class TrainingError(VendorNormError, RuntimeError):
    """Training could not continue (I/O failure, aborted run)."""
