"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new exception types should
subclass one of the four top-level categories rather than Exception.
"""


class TabsslError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TabsslError):
    """Invalid configuration, arguments, or API usage."""


class StateError(ConfigError):
    """An operation was called before the object was put in a valid state."""


class ShapeError(TabsslError, ValueError):
    """Array dimensions are incompatible with the requested operation."""


class DataError(TabsslError):
    """Base class for problems with input data."""


class ParseError(DataError):
    """A delimited file could not be parsed."""


class IntegrityError(DataError):
    """Data violates structural guarantees (duplicate ids, label conflicts)."""


class TaskError(DataError):
    """The data cannot support the requested task (e.g. a single class)."""


class StratificationError(DataError):
    """A stratified split cannot place every class in every partition."""


class NumericError(TabsslError):
    """Numeric computation produced or would produce invalid values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss or gradient.

    Carries the epoch and step where the divergence was detected when the
    trainer knows them.
    """

    def __init__(self, message, epoch=None, step=None):
        if epoch is not None:
            message = f"{message} (epoch={epoch}" + (
                f", step={step})" if step is not None else ")"
            )
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class OracleError(TabsslError):
    """A verification oracle's own preconditions were violated.

    Raised, for example, when a function handed to the gradient checker is
    not deterministic, which would make finite differences meaningless.
    """
