"""Exception hierarchy shared across the package.

The CLI maps each category to its own exit status.
"""


class ColorCNNError(Exception):
    exit_code = 1


class ConfigError(ColorCNNError, ValueError):
    exit_code = 2


class FileMissingError(ColorCNNError, FileNotFoundError):
    exit_code = 3


class DatasetError(ColorCNNError):
    """A dataset archive or record could not be read."""

    exit_code = 4


class NumericalError(ColorCNNError, FloatingPointError):
    exit_code = 5


class CheckpointError(ColorCNNError):
    exit_code = 6


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointKindError(CheckpointError, TypeError):
    """Checkpoint holds a different kind of model than requested."""


class CodecError(ColorCNNError):
    exit_code = 7


class CapacityError(CodecError, ValueError):
    pass


class CodecUnavailableError(CodecError, EnvironmentError):
    pass


class InvariantError(ColorCNNError, ValueError):
    pass
