"""Exception hierarchy.

Each class carries the process exit code the command line maps it to.
"""


class VtrigError(Exception):
    exit_code = 1


class ConfigError(VtrigError, ValueError):
    exit_code = 2


class ContractError(VtrigError, ValueError):
    """An operation was called with arguments violating its preconditions."""

    exit_code = 2


class DataError(VtrigError):
    exit_code = 3


class FormatError(DataError):
    pass


class BoundsError(DataError, IndexError):
    pass


class NoPeriodicityError(VtrigError):
    exit_code = 4


class DeltaNotIdentifiableError(VtrigError):
    exit_code = 4


class NoCPsFoundError(VtrigError):
    exit_code = 4

    def __init__(self, message, max_score=float("nan")):
        super().__init__(message)
        self.max_score = max_score


class DegenerateProfileError(DataError):
    pass
