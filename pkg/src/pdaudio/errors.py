"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so each class carries the code it
should produce.
"""


class PDAudioError(Exception):
    exit_code = 2


class InvalidArgument(PDAudioError, ValueError):
    pass


class OutOfDomain(InvalidArgument):
    """A quantity was requested where it is not finite (e.g. log-SNR at an endpoint)."""


class SingularParameterization(PDAudioError, ArithmeticError):
    """The implied x-prediction is undefined (eps-prediction at alpha == 0)."""


class DegenerateTarget(PDAudioError, ArithmeticError):
    pass


class NumericFailure(PDAudioError, ArithmeticError):
    """Non-finite values appeared mid-computation.

    Attributes:
        step: sampler step / optimizer update at which the failure was seen.
        t: offending fractional time(s), when known.
        last_good_state: a state dict captured before the failure, when known.
    """

    def __init__(self, message, step=None, t=None, last_good_state=None):
        super().__init__(message)
        self.step = step
        self.t = t
        self.last_good_state = last_good_state


class IngestError(PDAudioError):
    exit_code = 3

    def __init__(self, message, filename=None):
        super().__init__(message if filename is None else f"{filename}: {message}")
        self.filename = filename


class ConfigError(PDAudioError):
    exit_code = 1


class CorruptFile(PDAudioError):
    pass


class IncompatibleCheckpoint(PDAudioError):
    pass
