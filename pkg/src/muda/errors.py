"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or config file is invalid."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes are incompatible for the requested operation."""


class StateError(RuntimeError):
    """An operation was called in a state that cannot support it."""


class ConsistencyError(RuntimeError):
    """An internal numerical invariant was violated beyond rounding noise."""


class GradCheckError(RuntimeError):
    """The function under gradient check is not deterministic."""


class IdxFormatError(ValueError):
    """An IDX file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
