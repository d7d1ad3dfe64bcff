"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: configuration and usage problems exit 1,
data problems exit 2 and training divergence exits 3.
"""


class NangError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ShapeError(NangError, ValueError):
    """Operand shapes are incompatible."""


class InvalidArgumentError(NangError, ValueError):
    """An argument lies outside its documented domain."""

    exit_code = 1


class InvalidDataError(NangError, ValueError):
    """Input data breaks a structural invariant."""


class LoadError(InvalidDataError):
    """A dataset file failed to parse or validate."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TrainingDivergedError(NangError, FloatingPointError):
    """A loss or gradient became non-finite."""

    exit_code = 3

    def __init__(self, message, round_index=None):
        self.round_index = round_index
        if round_index is not None:
            message = f"round {round_index}: {message}"
        super().__init__(message)


class UnsupportedSettingError(NangError, ValueError):
    """The requested evaluation does not apply to this dataset."""


class MissingLabelsError(NangError, ValueError):
    """Classification was requested on a dataset without labels."""


class ConfigError(NangError, ValueError):
    """A run configuration is malformed; ``key`` names the offending path."""

    exit_code = 1

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
