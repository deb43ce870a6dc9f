"""Exception types shared across the package."""


class NumericError(FloatingPointError):
    """NaN/Inf produced, or an iteration diverged."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GraphError(RuntimeError):
    """A value was not recorded on the tape it is being differentiated through."""


class DataError(ValueError):
    """Malformed dataset, prediction, or config file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
