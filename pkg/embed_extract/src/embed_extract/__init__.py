"""Offline data preparation: embedding extraction into the shared binary
format and rate-limited reverse geocoding into the shared CSV schema.

This package talks to the retrieval pipeline only through those two file
formats; it imports nothing from it.
"""

from embed_extract.embed import (EMBED_DIM, ExtractJob, ExtractManifest,
                                 FakeEncoder, extract_embeddings,
                                 write_embedding_file)
from embed_extract.errors import ExtractError, GeocodeError
from embed_extract.geocode import (CoordinateCache, GeocodeJob,
                                   NominatimClient, RateLimiter,
                                   reverse_geocode, write_metadata_csv)

__all__ = [
    "EMBED_DIM", "ExtractJob", "ExtractManifest", "FakeEncoder",
    "extract_embeddings", "write_embedding_file", "ExtractError",
    "GeocodeError", "CoordinateCache", "GeocodeJob", "NominatimClient",
    "RateLimiter", "reverse_geocode", "write_metadata_csv",
]
