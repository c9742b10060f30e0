"""Exception hierarchy shared by every fmgcam module."""


class FMGCAMError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(FMGCAMError, ValueError):
    """An argument is outside its permitted range."""


class ShapeError(FMGCAMError, ValueError):
    """Array shapes do not agree."""


class NumericError(FMGCAMError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UnsupportedModel(FMGCAMError):
    """The model cannot be explained (e.g. it has no convolutional layer)."""


class InputShapeError(FMGCAMError, ValueError):
    """The image does not match the model's input contract."""


class ClassIndexError(FMGCAMError, IndexError):
    """A class id is out of range or was not captured."""


class GradientUnavailable(FMGCAMError):
    """Gradients cannot be obtained from the model at the requested layer."""


class ImageReadError(FMGCAMError, OSError):
    """An image file could not be decoded."""
