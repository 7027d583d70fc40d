class RailRowError(Exception):
    exit_code = 1


class ValidationError(RailRowError, ValueError):
    exit_code = 3


class AnnotationError(ValidationError):
    pass


class MalformedAnnotationError(AnnotationError):
    pass


class NonMonotonePolylineError(AnnotationError):
    pass


class DuplicateOrderError(AnnotationError):
    pass


class UnknownSceneTagError(AnnotationError):
    pass


class CheckpointFormatError(RailRowError):
    exit_code = 5


class NumericError(RailRowError, FloatingPointError):
    """Non-finite loss or activations during training."""

    exit_code = 4
