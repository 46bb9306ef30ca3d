"""Exception hierarchy shared by every rpblend module."""


class RPBError(Exception):
    """Base class for all rpblend errors."""


class ImageIOError(RPBError, OSError):
    pass


class DecodeError(RPBError, ValueError):
    pass


class ShapeMismatchError(RPBError, ValueError):
    pass


class OutOfBoundsError(RPBError, ValueError):
    pass


class EmptyMaskError(RPBError, ValueError):
    pass


class RegionTouchesBorderError(RPBError, ValueError):
    """The blend domain has no one-pixel Dirichlet ring inside the destination."""


class NoConvergenceError(RPBError, RuntimeError):
    """Raised only by strict solves; carries the unconverged result."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class RefTooSmallError(RPBError, ValueError):
    pass


class InvalidRangeError(RPBError, ValueError):
    pass


class InvalidAlphaError(RPBError, ValueError):
    pass


class CorpusExhaustedError(RPBError, RuntimeError):
    pass


class NoValidMaskError(RPBError, ValueError):
    pass


class ScoreFileMismatchError(RPBError, KeyError):
    pass


class ManifestParseError(RPBError, ValueError):
    def __init__(self, message, lineno):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TooSmallError(RPBError, ValueError):
    pass


class DimensionMismatchError(RPBError, ValueError):
    pass


class DegenerateAllZeroError(RPBError, ZeroDivisionError):
    pass
