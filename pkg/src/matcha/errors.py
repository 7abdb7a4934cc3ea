"""Exception hierarchy shared by all modules.

Each class carries the process exit code used by the CLI: 2 for violated
input contracts, 3 for malformed files, 4 for numerical failures.
"""


class MatchaError(Exception):
    exit_code = 1


class DomainError(MatchaError):
    """An argument violates an operation precondition."""

    exit_code = 2


class ConfigError(MatchaError):
    """A configuration value violates its invariants."""

    exit_code = 2


class InsufficientDataError(MatchaError):
    """Too few samples for the requested estimation."""

    exit_code = 2


class FormatError(MatchaError):
    """A file does not conform to its declared binary/text format."""

    exit_code = 3


class NumericalError(MatchaError):
    """A computation produced non-finite values; carries the sub-term name."""

    exit_code = 4

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term
