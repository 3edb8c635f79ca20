"""Exception hierarchy shared by all akcy modules."""


class AkcyError(Exception):
    """Base class for every error raised by the package."""


class InvalidField(AkcyError, ValueError):
    pass


class GridMismatch(AkcyError, ValueError):
    pass


class NotSolvable(AkcyError, ValueError):
    pass


# structure validation
class NotClosed(AkcyError, ValueError):
    pass


class NotCompatible(AkcyError, ValueError):
    pass


class NotPositive(AkcyError, ValueError):
    pass


class NotInvariant(AkcyError, ValueError):
    pass


class PairingBroken(AkcyError, ValueError):
    pass


class FrameDegenerate(AkcyError, ValueError):
    pass


# solver failures
class NumericalFailure(AkcyError, RuntimeError):
    """A solver gave up. ``report`` carries whatever was computed so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoConvergence(NumericalFailure):
    pass


class NewtonDiverged(NumericalFailure):
    pass


class PositivityLost(NumericalFailure):
    pass


class KrylovStall(NumericalFailure):
    pass


class StepUnderflow(NumericalFailure):
    pass


class Cancelled(NumericalFailure):
    pass


class NotTaming(AkcyError, ValueError):
    pass


class ObstructionNonzero(NumericalFailure):
    pass


# cli / io
class ParseError(AkcyError, ValueError):
    pass


class ValidationError(AkcyError, ValueError):
    pass


class FormatError(AkcyError, ValueError):
    pass


class IoError(AkcyError, OSError):
    pass
