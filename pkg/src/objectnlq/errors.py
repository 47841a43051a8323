"""Exception hierarchy shared by the library and the command line.

Each family carries the process exit code the CLI reports for it.
"""


class ObjectNLQError(Exception):
    exit_code = 1


class ConfigError(ObjectNLQError, ValueError):
    exit_code = 2


class ShapeError(ObjectNLQError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    exit_code = 2


class DataError(ObjectNLQError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """A file on disk does not follow its declared binary/text layout."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")


class NonFiniteError(ObjectNLQError, FloatingPointError):
    exit_code = 3


class GradcheckError(ObjectNLQError):
    exit_code = 4
