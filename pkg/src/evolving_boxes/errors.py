"""Exception types shared across the package."""


class EvolvingBoxesError(Exception):
    """Base class for every error raised by this package."""


class InvalidShapeError(EvolvingBoxesError, ValueError):
    pass


class InvalidBoxError(EvolvingBoxesError, ValueError):
    pass


class ContractError(EvolvingBoxesError, RuntimeError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class ConfigError(EvolvingBoxesError, ValueError):
    pass


class FormatError(EvolvingBoxesError, ValueError):
    """Malformed PPM, CSV or checkpoint content."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointVersionError(FormatError):
    pass


class CheckpointTruncatedError(FormatError):
    pass


class ArchitectureMismatchError(EvolvingBoxesError, ValueError):
    """Checkpoint tensors do not fit the architecture implied by a config."""

    def __init__(self, name: str, expected, found):
        super().__init__(
            f"parameter {name!r}: expected shape {tuple(expected)}, found {tuple(found)}"
        )
        self.name = name


class NonFiniteLossError(EvolvingBoxesError, FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
