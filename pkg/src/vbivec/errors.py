"""Exception hierarchy; each class carries the CLI exit code it maps to."""

from __future__ import annotations


class VBIVectorError(Exception):
    """Base class for every error raised by vbivec."""

    exit_code: int = 1


class ConfigError(VBIVectorError):
    """Raised for invalid configuration keys, values or flag combinations."""

    exit_code = 2


class DataError(VBIVectorError):
    """Raised when input data is malformed or inconsistent."""

    exit_code = 3


class DimensionMismatchError(DataError):
    """Raised when array shapes do not conform to the model dimensions."""


class StaleStatisticsError(DataError):
    """Raised when statistics were centered on different means than the model's."""


class RecipeMismatchError(DataError):
    """Raised when the inputs do not match what a training recipe needs."""


class ManifestError(DataError):
    """Raised for duplicate ids, missing files or missing manifest columns."""


class FormatError(DataError):
    """Raised when a file does not follow its binary or text format."""

    def __init__(self, message: str, offset: int | None = None, field: str | None = None):
        where = []
        if field is not None:
            where.append(f"field={field}")
        if offset is not None:
            where.append(f"offset={offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.field = field


class BadMagicError(FormatError):
    """Raised when the leading magic bytes are wrong."""


class TruncatedPayloadError(FormatError):
    """Raised when a file ends before its declared payload."""


class NonFiniteValueError(FormatError):
    """Raised when a payload holds NaN or infinite values."""


class VersionMismatchError(FormatError):
    """Raised when a file declares an unsupported format version."""


class NumericalError(VBIVectorError):
    """Raised when a numerical procedure cannot proceed."""

    exit_code = 4


class NotPositiveDefiniteError(NumericalError):
    """Raised when a covariance or precision fails its Cholesky factorization."""


class DegenerateComponentError(NumericalError):
    """Raised when a mixture component has (near) zero responsibility mass."""

    def __init__(self, component: int, mass: float):
        super().__init__(f"component {component} is degenerate: total responsibility mass {mass:.3g}")
        self.component = component
        self.mass = mass


class SingularMomentError(NumericalError):
    """Raised when an M-step moment matrix cannot be solved."""

    def __init__(self, component: int, detail: str = ""):
        msg = f"singular moment matrix for component {component}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.component = component
