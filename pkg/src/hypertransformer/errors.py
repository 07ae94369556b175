"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with an operation."""


class ContractError(ValueError):
    """A precondition on argument values was violated."""


class DegenerateInputError(ValueError):
    """A metric is undefined for the given input (zero variance, zero norm...)."""


class FormatError(ValueError):
    """A binary container could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""
