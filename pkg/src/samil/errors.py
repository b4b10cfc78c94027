"""Exception types shared across the package."""


class SamilError(Exception):
    """Base class for all package errors."""


class ShapeError(SamilError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SamilError, ValueError):
    """An argument lies outside the domain of the operation."""


class ContractError(SamilError, RuntimeError):
    """A precondition on program state was violated."""


class NonFiniteError(ContractError, FloatingPointError):
    """A tensor acquired NaN or Inf values."""


class DegenerateAttentionError(SamilError, ValueError):
    """Combined attention has no mass (every a_k * b_k is zero)."""


class ConfigurationError(SamilError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(SamilError, ValueError):
    """A file on disk is corrupt, truncated or of the wrong version."""
