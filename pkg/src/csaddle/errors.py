"""Exception hierarchy shared by all modules."""


class CSaddleError(Exception):
    """Base class for all package errors."""


class InvalidSpec(CSaddleError, ValueError):
    pass


class Disconnected(CSaddleError):
    """Random graph sampling never produced a connected graph."""


class NotConnected(CSaddleError):
    """Algebraic connectivity is numerically zero."""


class NumericalError(CSaddleError, ValueError):
    pass


class DegenerateInstance(CSaddleError):
    pass


class NotInRange(CSaddleError, ValueError):
    pass


class CompressorRejected(CSaddleError):
    pass


class Diverged(CSaddleError):
    """Raised when an iterate becomes non-finite or exceeds the divergence guard.

    ``trace`` holds whatever was recorded before the failure.
    """

    def __init__(self, message, round_index=None, trace=None):
        super().__init__(message)
        self.round_index = round_index
        self.trace = trace


class TuningFailed(CSaddleError):
    pass


class InsufficientData(CSaddleError, ValueError):
    pass


class IncomparableTraces(CSaddleError, ValueError):
    pass


class ConfigError(CSaddleError, ValueError):
    """Config document failed to parse or validate; message carries file:line anchors."""

    def __init__(self, message, line=None, path=None):
        super().__init__(message)
        self.line = line
        self.path = path
