"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class StateError(RuntimeError):
    """An object was used out of order, e.g. backward on a stale cache."""


class NumericalError(FloatingPointError):
    """A computation produced NaN or Inf."""


class IdxFormatError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
