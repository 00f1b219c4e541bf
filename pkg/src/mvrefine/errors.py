"""Exception types shared across the package."""


class MvRefineError(Exception):
    """Base class for all package-specific errors."""


class DegenerateProjection(MvRefineError):
    """Point lies on (or numerically too close to) the camera's principal plane."""


class InvalidSpec(MvRefineError):
    """A rig/arrangement specification violates its invariants."""


class ParseError(MvRefineError):
    """A calibration or config file could not be parsed; message names the field."""


class InvariantError(MvRefineError):
    """Loaded data violates a structural invariant (e.g. non-orthonormal rotation)."""


class InsufficientViews(MvRefineError):
    """Fewer than two effective views available for triangulation."""


class IllConditioned(MvRefineError):
    """Triangulation normal matrix condition number exceeds the safety threshold."""


class DimMismatch(MvRefineError):
    """Input vector dimension does not match the network's first layer."""


class TapeReuse(MvRefineError):
    """A forward tape was consumed by more than one backward pass."""


class ShapeMismatch(MvRefineError):
    """Parameter/gradient containers disagree in shape or naming."""


class NonSquareK(MvRefineError):
    """Query count is not a perfect square, so no uniform grid exists."""


class InsufficientAnchors(MvRefineError):
    """Fewer anchors than required to give every ground-truth pose W matches."""


class NonFiniteLoss(MvRefineError):
    """Training loss became NaN/Inf; carries the offending step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class MissingCheckpoint(MvRefineError):
    """A benchmark run referenced a checkpoint file that does not exist."""
