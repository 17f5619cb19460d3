"""Exception types shared across the package."""


class RailswinError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(RailswinError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidParam(RailswinError):
    """A parameter is outside its documented range."""


class NotScalar(RailswinError):
    """backward() was called on a non-scalar tensor."""


class NoTape(RailswinError):
    """backward() was called on a tensor with no recorded operations."""


class NonFinite(RailswinError):
    """A computation produced NaN or Inf."""


class IndivisibleInput(RailswinError):
    """Input extent is not divisible by the required factor."""


class ParseError(RailswinError):
    """A document (annotation JSON, config JSON, image file) is malformed."""


class DanglingReference(RailswinError):
    """An annotation references a missing image or category."""


class MissingStats(RailswinError):
    """A report category has no matching size statistics."""


class DatasetEmpty(RailswinError):
    """Training was requested on an empty dataset."""


class NonFiniteLoss(RailswinError):
    """The training loss became NaN or Inf."""
