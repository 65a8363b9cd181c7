"""Exception hierarchy. Each class maps to one CLI exit code."""


class CresteError(Exception):
    exit_code = 1


class ConfigError(CresteError, ValueError):
    exit_code = 2


class DataError(CresteError, ValueError):
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(CresteError, ArithmeticError):
    exit_code = 4


class RankDeficientError(NumericalError):
    """Design (or weighted Gram matrix) lacks full column rank."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class DegenerateInstrumentError(NumericalError):
    pass


class BandwidthError(NumericalError):
    pass
