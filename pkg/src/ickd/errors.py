"""Exception hierarchy shared by every ickd module."""


class IckdError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(IckdError, ValueError):
    pass


class DegenerateVectorError(IckdError, ValueError):
    """A vector whose norm is too small for a cosine similarity."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericInstabilityError(IckdError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, coordinate=None, partial=None):
        super().__init__(message)
        self.coordinate = coordinate
        # training aborts attach whatever metrics were collected so far
        self.partial = partial


class InsufficientCandidatesError(IckdError, LookupError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class FormatError(IckdError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(IckdError, ValueError):
    def __init__(self, message, line=None, column=None, key=None):
        where = ""
        if line is not None:
            where = f"line {line}, column {column or 1}: "
        super().__init__(where + message)
        self.line = line
        self.column = column
        self.key = key
