"""Exception hierarchy shared across the package."""


class TacuvError(Exception):
    """Base class for all package errors."""


class EngineError(TacuvError):
    """Raised by the tensor engine for invalid graph operations."""


class ShapeError(EngineError):
    """Operand shapes do not conform for an op.

    Carries the op name and both shapes so callers can report precisely
    which operation failed.
    """

    def __init__(self, op, shape_a, shape_b, detail=""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        msg = f"op '{op}': shapes {self.shape_a} and {self.shape_b} do not conform"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(TacuvError):
    """Invalid or corrupt data (files, layouts, records)."""


class FormatError(DataError):
    """A binary container failed validation (bad magic, header, sizes)."""


class UrdfError(DataError):
    """Structured robot-description parse error with source position."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FitError(TacuvError):
    """An optimization run failed (non-finite loss, divergence)."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
