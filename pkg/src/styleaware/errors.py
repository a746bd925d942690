"""Exception types shared across the package."""


class StyleAwareError(Exception):
    """Base class for all package errors."""


class ShapeError(StyleAwareError, ValueError):
    """Input dimensions are incompatible with the requested operation."""


class NonFiniteError(StyleAwareError, ValueError):
    """An array, parameter or loss contains NaN or infinity."""


class NonFiniteLossError(NonFiniteError):
    """Raised by a training step before any parameter is touched.

    ``report`` carries the loss values that were computed so far.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(StyleAwareError, ValueError):
    pass


class GroupingError(StyleAwareError, ValueError):
    pass


class ClassifierError(StyleAwareError, ValueError):
    pass


class CheckpointError(StyleAwareError, IOError):
    pass


class ImageDecodeError(StyleAwareError, IOError):
    """An image or video frame could not be decoded.

    ``index`` is the frame position for video sequences, else None.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
