"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite values produced by {op}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class FormatError(ValueError):
    """A binary file failed to parse."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DegenerateInputError(ValueError):
    """A metric is undefined for the given input (zero rows, zero matrix)."""


class ContaminationError(ValueError):
    """A supposedly clean subset contains poisoned samples."""


class TrainingFailure(RuntimeError):
    """Training diverged; ``last_good_epoch`` is the last finite epoch."""

    def __init__(self, message, last_good_epoch):
        self.last_good_epoch = last_good_epoch
        super().__init__(f"{message} (last good epoch: {last_good_epoch})")
