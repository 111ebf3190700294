class DomainError(ValueError):
    """Raised when an argument violates an operation's documented domain."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""
