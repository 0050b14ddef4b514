"""Exception taxonomy shared by all modules.

Each class maps onto one CLI exit-code family (see cli.py).
"""


class XmreidError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XmreidError):
    """Operand dimensions are incompatible for the requested operation."""


class UsageError(XmreidError):
    """An API contract was violated by the caller (bad label, bad level,
    non-scalar backward root, sampling contract violation, ...)."""


class ConfigError(XmreidError):
    """A configuration is internally inconsistent or infeasible; raised at
    construction time, never mid-computation."""


class NumericError(XmreidError):
    """A numeric invariant broke: NaN/Inf input where finite values are
    required, or a NaN loss during training."""
