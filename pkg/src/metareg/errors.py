"""Exception hierarchy shared by every module."""


class MetaRegError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(MetaRegError, ValueError):
    pass


class DimensionMismatch(MetaRegError, ValueError):
    pass


class DomainError(MetaRegError, ValueError):
    pass


class UnsupportedNcp(DomainError):
    pass


class UnsupportedCovariateCount(MetaRegError, ValueError):
    pass


class IndexOutOfRange(MetaRegError, IndexError):
    pass


class CollinearDesign(MetaRegError):
    """X'WX is numerically singular (dummy trap or multicollinearity)."""


class GroupTooSmall(MetaRegError):
    pass


class ExcessiveFailures(MetaRegError):
    """More than the tolerated share of iterations failed for some spec."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ConfigError(MetaRegError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParseError(MetaRegError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class MissingValue(ParseError):
    pass


class ValidationError(MetaRegError, ValueError):
    pass


class DegenerateVariable(MetaRegError, ValueError):
    pass


class InsufficientGroups(MetaRegError, ValueError):
    pass
