"""Exception and warning types shared across the package."""


class MacvError(Exception):
    """Base class for all errors raised by macv."""


# data model

class DatasetError(MacvError, ValueError):
    """A dataset violates a container invariant.

    ``violations`` holds every problem found during validation, so a caller
    can report all of them at once instead of fixing one at a time.
    """

    def __init__(self, message, subject_id=None, violations=None):
        super().__init__(message)
        self.subject_id = subject_id
        self.violations = list(violations) if violations else [self]


class DuplicateSubjectId(DatasetError):
    pass


class ShapeMismatch(DatasetError):
    pass


class NonFiniteValue(DatasetError):
    pass


class DegenerateSplit(MacvError, ValueError):
    pass


class DomainError(MacvError, ValueError):
    """An argument lies outside the domain of a loss or family."""


# estimation

class NonConvergence(MacvError, RuntimeError):
    pass


class SeparationSuspected(NonConvergence):
    """Fitted linear predictor diverging, as under (quasi-)separation."""


class RankDeficientInstruments(MacvError, ValueError):
    pass


class SingularJacobian(MacvError, ArithmeticError):
    pass


class NoProgress(MacvError, RuntimeError):
    pass


class SingularInformation(MacvError, ArithmeticError):
    pass


class CvCellError(MacvError, RuntimeError):
    """A leave-subject-out cell could not be computed."""

    def __init__(self, candidate, subject, cause):
        super().__init__(f"cell (s={candidate}, i={subject}) failed: {cause!r}")
        self.candidate = candidate
        self.subject = subject
        self.cause = cause


# simulation

class InfeasibleCorrelation(MacvError, ValueError):
    pass


class CalibrationFailure(MacvError, RuntimeError):
    pass


class UnstableSystem(MacvError, ValueError):
    pass


class ZeroVariance(MacvError, ArithmeticError):
    pass


# non-fatal conditions; reported through ``warnings`` and result flags

class MacvWarning(UserWarning):
    pass


class NonConvergenceWarning(MacvWarning):
    pass


class UnstableRhoWarning(MacvWarning):
    pass


class MaxItersReached(MacvWarning):
    pass


class SealFallbackWarning(MacvWarning):
    pass


class ImoriStubWarning(MacvWarning):
    pass
