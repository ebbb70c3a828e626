"""Exception hierarchy shared by all tpnet modules.

The CLI maps these onto distinct exit codes (see ``tpnet.cli``):
configuration problems, data/shape/integrity problems and numeric
failures are kept apart so callers can react without parsing messages.
"""


class TPNetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TPNetError, ValueError):
    """Invalid or inconsistent configuration (bad channel counts, unknown keys, ...)."""


class UnsupportedOperationError(ConfigurationError):
    """Operation requested on a model configured without the needed component."""


class ShapeError(TPNetError, ValueError):
    """Array shape violates an operation's contract (also undersized inputs)."""


class DataError(TPNetError, ValueError):
    """Malformed manifests, missing files, unpaired or unparsable records."""


class IntegrityError(TPNetError, ValueError):
    """Archive/checkpoint corruption, or missing/extra/mismatched tensors."""


class NumericError(TPNetError, ArithmeticError):
    """Non-finite values or degenerate statistics where finite math is required."""
