"""Exception types shared across the package."""


class KoopmanFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(KoopmanFlowError, ValueError):
    """Shapes or axis lengths do not satisfy an operation's contract."""


class ConfigError(KoopmanFlowError, ValueError):
    """A configuration value is outside its valid range."""


class ContractError(KoopmanFlowError, ValueError):
    """A call violates a documented precondition other than shape."""


class NumericError(KoopmanFlowError, ArithmeticError):
    """Non-finite values or a failed numerical factorization."""


class FormatError(KoopmanFlowError, ValueError):
    """A serialized file is corrupt or carries the wrong magic."""


class CorrelationUndefined(KoopmanFlowError, ValueError):
    """Pearson correlation requested on a zero-variance series."""
