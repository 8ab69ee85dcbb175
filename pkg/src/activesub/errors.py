"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what the network or oracle expects."""


class DomainError(ValueError):
    """An argument lies outside the set of valid values (label, head index...)."""


class UsageError(ValueError):
    """A caller broke a precondition: empty input, bad config, k too large."""


class FormatError(ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SingularGradientError(ArithmeticError):
    """Gradient norm too small for a projection step."""


class NumericalError(ArithmeticError):
    """Non-finite value produced inside an optimizer loop."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TransportError(RuntimeError):
    """Remote oracle failure.

    ``attempted`` counts the queries sent before the failure and
    ``completed`` holds labels for the prefix that did succeed.
    """

    def __init__(self, message, attempted=0, completed=None):
        super().__init__(message)
        self.attempted = attempted
        self.completed = list(completed or [])
