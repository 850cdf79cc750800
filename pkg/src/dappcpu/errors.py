"""Exception types shared across the package."""


class DappError(Exception):
    """Base class for all package errors."""


class MalformedInputError(DappError, ValueError):
    pass


class InvalidPlanError(DappError, ValueError):
    """A scheduling plan violates its structural invariants."""


class FitError(DappError, ValueError):
    pass


class UnderdeterminedFitError(FitError):
    pass


class NonPhysicalFitError(FitError):
    pass


class MalformedLineError(DappError, ValueError):
    """A telemetry line could not be parsed.

    ``offset`` is the byte offset of the offending field within the line and
    ``field`` its zero-based index (``None`` when the field count is wrong).
    ``lineno`` is filled in by stream readers.
    """

    def __init__(self, message, offset=0, field=None, lineno=None):
        super().__init__(message)
        self.offset = offset
        self.field = field
        self.lineno = lineno

    def __str__(self):
        where = f"byte {self.offset}"
        if self.field is not None:
            where += f", field {self.field}"
        if self.lineno is not None:
            where = f"line {self.lineno}, " + where
        return f"{self.args[0]} ({where})"


class InconsistentCountersError(DappError, ValueError):
    pass


class UnmappedThreadError(DappError, KeyError):
    pass


class ConfigError(DappError, ValueError):
    pass


class OracleSizeError(DappError, ValueError):
    pass
