"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage 1, data/config 2, numeric 3.
"""


class MultigrainError(Exception):
    exit_code = 2


class UsageError(MultigrainError):
    exit_code = 1


class ConfigError(MultigrainError):
    exit_code = 2


class DataError(MultigrainError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class IntegrityError(DataError):
    pass


class NumericError(MultigrainError):
    exit_code = 3
