"""Exception hierarchy shared across the package."""


class EsnAsrError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EsnAsrError, ValueError):
    pass


class InvalidRangeError(EsnAsrError, ValueError):
    pass


class InvalidConfigError(EsnAsrError, ValueError):
    pass


class EmptyInputError(EsnAsrError, ValueError):
    pass


class VocabError(EsnAsrError, ValueError):
    pass


class NonConvergenceError(EsnAsrError, ArithmeticError):
    """Power iteration did not settle; ``best_estimate`` holds the last value seen."""

    def __init__(self, message, best_estimate):
        super().__init__(message)
        self.best_estimate = best_estimate


class ReservoirGenerationError(EsnAsrError):
    pass


class CacheMismatchError(EsnAsrError):
    """A backward call received a cache produced by a different cell or shape."""


class OracleTooLargeError(EsnAsrError, ValueError):
    pass


class DivergenceError(EsnAsrError, ArithmeticError):
    """Training produced a non-finite loss. ``report`` carries the steps run so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SingularSystemError(EsnAsrError, ArithmeticError):
    pass


class InvalidReferenceError(EsnAsrError, ValueError):
    pass


class ModelFileError(EsnAsrError):
    pass


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class ConfigMismatchError(ModelFileError):
    pass
