"""Exception hierarchy for rankstack.

Every error raised by the library derives from RankstackError and from the
closest built-in exception, so callers catching ValueError keep working.
"""

from typing import Optional, Tuple


class RankstackError(Exception):
    """Base class for all rankstack errors."""


class InvalidInputError(RankstackError, ValueError):
    """Input data is malformed, non-finite or empty."""


class ShapeError(RankstackError, ValueError):
    """Array dimensions do not match."""

    def __init__(
        self,
        message: str,
        expected: Optional[Tuple[int, ...]] = None,
        actual: Optional[Tuple[int, ...]] = None,
    ):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class RangeError(RankstackError, ValueError):
    """A scalar argument or column window lies outside its valid range."""

    def __init__(
        self,
        message: str,
        offset: Optional[int] = None,
        r: Optional[int] = None,
        p: Optional[int] = None,
    ):
        super().__init__(message)
        self.offset = offset
        self.r = r
        self.p = p


class ConfigurationError(RankstackError, ValueError):
    """Configuration is invalid. `field` holds the dotted path when known."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.reason = message
        self.field = field


class CapacityExhaustedError(ConfigurationError):
    """ROTATE basis ran out of singular directions."""

    def __init__(self, round_index: int, r: int, p: int):
        super().__init__(
            f"ROTATE basis exhausted at round {round_index}: "
            f"needs r*t = {r * round_index} singular directions, only {p} available"
        )
        self.round_index = round_index
        self.r = r
        self.p = p


class NumericalError(RankstackError, ArithmeticError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, rows: int, cols: int):
        super().__init__(f"{message} (matrix {rows}x{cols})")
        self.rows = rows
        self.cols = cols


class TrainingAbortedError(RankstackError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, round_index: Optional[int] = None):
        prefix = f"round {round_index}: " if round_index is not None else ""
        super().__init__(prefix + message)
        self.round_index = round_index


class IntegrityError(RankstackError):
    """A stored artifact is truncated or fails its checksum."""
