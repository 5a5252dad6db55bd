"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array lengths or dimensions do not line up."""


class InputError(ValueError):
    """Caller-supplied value outside its allowed domain."""


class StateError(RuntimeError):
    """Operation not permitted in the object's current state."""


class DataError(KeyError):
    """A required metrics entry is missing."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message: str, phase: str = "", iteration: int | None = None):
        super().__init__(message)
        self.phase = phase
        self.iteration = iteration


class ConfigError(ValueError):
    """Experiment configuration failed to parse or validate."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line
