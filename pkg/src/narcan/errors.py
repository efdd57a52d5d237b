"""Exception hierarchy shared by every narcan module.

Each exception carries an ``exit_code`` so the command line front end can map
failures onto its stable exit-status contract (2 user/config, 3 backend,
4 numeric).
"""

from __future__ import annotations


class NarcanError(Exception):
    exit_code = 2
    module = "narcan"

    @property
    def code(self) -> str:
        return f"{self.module}.{type(self).__name__}"


# frames_io
class FramesError(NarcanError):
    module = "frames_io"


class EmptyDirectory(FramesError):
    pass


class DimensionMismatch(FramesError):
    pass


class DecodeFailure(FramesError):
    pass


class IoFailure(FramesError):
    pass


class ManifestMissing(FramesError):
    pass


class InvalidInput(NarcanError):
    """A value violates a documented invariant (shape, range, finiteness)."""


# fields
class DegenerateHomography(NarcanError):
    module = "fields"
    exit_code = 4

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# prior
class PriorError(NarcanError):
    module = "prior"


class BackendUnavailable(PriorError):
    exit_code = 3

    def __init__(self, message: str, retry_hint: str = "check the backend URL and retry"):
        super().__init__(f"{message} ({retry_hint})")
        self.retry_hint = retry_hint


class GeometryMismatch(PriorError):
    pass


class UnsupportedCapability(PriorError):
    pass


# training
class NumericFailure(NarcanError):
    module = "training"
    exit_code = 4


# separation
class InfeasiblePlan(NarcanError):
    module = "separation"


# editing
class CoverageError(NarcanError):
    module = "editing"

    def __init__(self, message: str, frame: int | None = None, fraction: float = 0.0):
        super().__init__(message)
        self.frame = frame
        self.fraction = fraction


# metrics
class ShapeMismatch(NarcanError):
    module = "metrics"


class LowCoverageError(NarcanError):
    module = "metrics"
    exit_code = 4

    def __init__(self, message: str, coverage: list[float]):
        super().__init__(message)
        self.coverage = coverage
