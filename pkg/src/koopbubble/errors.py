"""Exception hierarchy shared across the package.

The CLI maps the three top-level families onto exit codes: ``ConfigError``
(2), ``DataError`` (3) and ``NumericalError`` (4).
"""


class KoopBubbleError(Exception):
    pass


class ConfigError(KoopBubbleError, ValueError):
    pass


class DataError(KoopBubbleError):
    pass


class NumericalError(KoopBubbleError, ArithmeticError):
    pass


class DomainError(NumericalError, ValueError):
    """A physical quantity left its admissible domain (e.g. rho_theta <= 0)."""


class StabilityError(NumericalError):
    """The solver produced non-finite or non-positive values.

    ``last_state`` holds the most recent finite state when the caller can
    make use of it, ``time`` the simulation time at which failure was seen.
    """

    def __init__(self, message, time=None, last_state=None):
        super().__init__(message)
        self.time = time
        self.last_state = last_state


class GenerationError(NumericalError):
    pass


class DatasetFormatError(DataError):
    """Bad magic bytes or unsupported version."""


class DatasetTruncatedError(DataError):
    pass


class ChecksumError(DataError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class ShapeError(KoopBubbleError, ValueError):
    pass


class TapeError(KoopBubbleError, RuntimeError):
    pass


class TrainingAborted(NumericalError):
    def __init__(self, message, checkpoint=None, report=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report
