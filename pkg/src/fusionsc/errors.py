"""Exception types raised across the package."""


class FSCError(Exception):
    """Base class for all fusionsc errors."""


class RankDeficient(FSCError):
    pass


class IllConditioned(FSCError):
    """A restricted Gram matrix is too close to singular to solve against."""


class DimensionMismatch(FSCError, ValueError):
    pass


class ZeroColumn(FSCError):
    pass


class EmptyCluster(FSCError):
    pass


class Degenerate(FSCError, UserWarning):
    """Raised, or issued as a warning, for degenerate similarity graphs."""


class DegenerateRSS(FSCError):
    pass


class AllFailed(FSCError):
    pass


class LengthMismatch(FSCError, ValueError):
    pass


class ParseError(FSCError, ValueError):
    """Malformed matrix file. Carries the 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
