"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
OSError -> 3, NumericsError -> 4, DataError (and subclasses) -> 5.
"""


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericsError(ArithmeticError):
    """Non-finite values encountered where finiteness is required."""


class DataError(ValueError):
    """Input data (labels, files, checkpoints) is malformed or inconsistent."""


class FormatError(DataError):
    """A file failed structural validation.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """Checkpoint does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointExtentError(CheckpointError):
    """A stored tensor's extents disagree with the embedded config."""


class CheckpointTruncationError(CheckpointError):
    """Checkpoint ended before all declared blocks were read."""


class ConfigError(ValueError):
    """Run-configuration file is invalid.

    Carries the 1-based line number of the offending entry.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
