"""Error types for the extraction and geocoding jobs."""


class ExtractError(Exception):
    """A problem with an extraction job that cannot be skipped per item."""


class GeocodeError(Exception):
    """A problem with a geocoding job beyond per-coordinate failures."""
