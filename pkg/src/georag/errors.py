"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: UsageError -> 1, DataError -> 2,
TransportError -> 3.
"""


class GeoragError(Exception):
    """Base class for all package errors."""


class UsageError(GeoragError):
    """Caller violated a precondition (bad shapes, empty input, ...)."""


class DataError(GeoragError):
    """Input data is malformed beyond tolerance or a file is corrupt."""


class FormatError(DataError):
    """A binary file failed magic/version/truncation checks."""


class TransportError(GeoragError):
    """An external service could not be reached after retries."""


class CoordinateParseError(GeoragError):
    """No parsable coordinate pair in a model response."""


class CoordinateRangeError(GeoragError):
    """A parsed coordinate pair lies outside valid lat/lon ranges."""
