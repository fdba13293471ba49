"""Exception hierarchy shared by every module."""


class MVHybridError(Exception):
    """Base class for all library errors."""


class NonConvergence(MVHybridError):
    pass


class InvalidThreshold(MVHybridError, ValueError):
    pass


class NotRealSpectrum(MVHybridError, ValueError):
    pass


class InvalidSpectrum(MVHybridError, ValueError):
    pass


class LengthMismatch(MVHybridError, ValueError):
    pass


class DomainError(MVHybridError, ValueError):
    pass


class ShapeMismatch(MVHybridError, ValueError):
    pass


class NonSquareGrid(ShapeMismatch):
    pass


class ConjugateSymmetryViolation(MVHybridError):
    pass


class NonFinite(MVHybridError, FloatingPointError):
    pass


class NoSSMBlocks(MVHybridError):
    pass


class SingularSystem(MVHybridError, ValueError):
    pass


class NumericalFailure(MVHybridError):
    pass


class InsufficientGenes(MVHybridError, ValueError):
    pass


class InsufficientOverlap(MVHybridError, ValueError):
    pass


class InsufficientGroups(MVHybridError, ValueError):
    pass


class DivisionByZero(MVHybridError, ZeroDivisionError):
    pass


class InputFormatError(MVHybridError, ValueError):
    """Malformed input file; message carries the offending line number."""
