"""Exception hierarchy. The CLI maps each class to an exit code."""


class GnnValueError(Exception):
    exit_code = 1


class ConfigError(GnnValueError):
    exit_code = 2


class DataError(GnnValueError, ValueError):
    exit_code = 3


class NumericError(GnnValueError, ArithmeticError):
    exit_code = 4
