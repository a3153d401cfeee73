"""Exception hierarchy for the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ModelFormatError(EngineError):
    """Model file cannot be parsed (bad magic, truncated, invalid JSON, ...)."""


class UnknownOpError(EngineError):
    """Model references an operator kind the engine does not know."""


class GraphValidationError(EngineError):
    """Graph structure is inconsistent (dangling inputs, bad weights, ...)."""


class ShapeInferenceError(EngineError):
    """Tensor shapes cannot be inferred or are inconsistent."""


class ShapeMismatchError(EngineError):
    """Kernel operands have incompatible shapes."""


class LayoutError(EngineError):
    """Tensor layout metadata is inconsistent with its data."""


class UnsupportedSizeError(EngineError):
    """Requested transform size is outside the supported range."""


class UnsupportedOpError(EngineError):
    """Backend cannot execute the requested operator."""


class PoolExhaustedError(EngineError):
    """A buffer request exceeded the pre-planned memory pool."""
