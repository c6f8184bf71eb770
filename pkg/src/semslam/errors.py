"""Exception types shared across the back-end."""


class SemSlamError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SemSlamError):
    """An input violates a documented precondition or type invariant."""


class BehindCameraError(SemSlamError):
    """A prediction requires a landmark that is not in front of the camera."""


class DegenerateProjectionError(SemSlamError):
    """A projected conic is not a real, bounded ellipse."""


class DegenerateInputError(SemSlamError):
    """A point cloud or geometric input has too few degrees of freedom."""


class CannotInitializeError(SemSlamError):
    """Landmark creation must be deferred (no depth source yet)."""


class AlignmentDegenerateError(SemSlamError):
    """Trajectory alignment has too few or collinear correspondences."""


class InvalidSpecError(SemSlamError):
    """A scene specification is internally impossible."""


class DatasetFormatError(SemSlamError):
    """A dataset or solution file does not parse under the expected schema."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EvaluationError(SemSlamError):
    """A residual could not be evaluated at a (perturbed) linearization point."""


class NumericalFailureError(SemSlamError):
    """The optimizer could not make progress (indefinite system, etc.)."""
