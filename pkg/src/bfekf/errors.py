"""Exception hierarchy shared by the library and the CLI."""


class BfekfError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(BfekfError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(BfekfError, ValueError):
    """Array dimensions do not match."""


class UnsupportedFamilyError(BfekfError, ValueError):
    """The operation is not defined for the configured basis family."""


class NumericalError(BfekfError, ArithmeticError):
    """A filter step produced non-finite values or an ill-conditioned system."""


class ConfigError(BfekfError, ValueError):
    """Invalid experiment configuration."""
