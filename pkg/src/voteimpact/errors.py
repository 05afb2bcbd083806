"""Exception hierarchy shared across the package."""


class VoteImpactError(Exception):
    """Base class for all package errors."""


class InputError(VoteImpactError):
    """Malformed or inconsistent user-supplied input (CLI exit code 1)."""


class ParseError(InputError):
    """Row-level CSV parse failure; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
