"""Exception types shared across the package.

The CLI maps each family onto an exit code, so modules raise these rather
than bare ValueError/RuntimeError.
"""


class CtfError(Exception):
    """Base class for every error raised by ctfprune."""


class DimensionError(CtfError, ValueError):
    """Shapes of operands do not agree."""


class ConfigError(CtfError, ValueError):
    """A configuration value is out of its legal range."""


class InputError(CtfError, ValueError):
    """Caller-supplied data violates an operation's precondition."""


class FormatError(CtfError, ValueError):
    """A file on disk is malformed."""


class ContractError(CtfError, RuntimeError):
    """An API was used in the wrong order or on the wrong kind of value."""


class NonFiniteError(CtfError, FloatingPointError):
    """An operation produced NaN or Inf."""


class DivergenceError(CtfError, RuntimeError):
    """Training produced a non-finite loss.

    ``state`` carries whatever diagnostic snapshot the trainer had when it
    gave up (epoch, last finite loss, learning rate, sigma).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class StructuralError(CtfError, RuntimeError):
    """A pruning mask disconnects the network, so it cannot be compacted."""
