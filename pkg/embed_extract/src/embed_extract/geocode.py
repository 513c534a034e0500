"""Reverse geocoding against a Nominatim endpoint, rate limited and
cached, writing the CSV schema the retrieval pipeline ingests.

Address keys map onto eight geographic levels. Nominatim does not return
a continent and names the finer levels inconsistently (suburb vs
neighbourhood, town vs city), so each output field tries a short list of
keys in order and falls back to NA.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from embed_extract.errors import GeocodeError

METADATA_FIELDS = ("img_id", "lat", "lon", "neighbourhood", "city", "county",
                   "state", "region", "country", "country_code", "continent")

#: Output field -> Nominatim address keys tried in order.
ADDRESS_KEY_MAP = {
    "neighbourhood": ("neighbourhood", "suburb", "quarter"),
    "city": ("city", "town", "village", "municipality"),
    "county": ("county", "state_district"),
    "state": ("state",),
    "region": ("region",),
    "country": ("country",),
    "country_code": ("country_code",),
    "continent": ("continent",),
}

#: Cache keys round coordinates to 5 decimals, about 1 meter.
CACHE_DECIMALS = 5


class RateLimiter:
    """Enforces a minimum spacing between calls to wait().

    Clock and sleep are injectable so tests can drive it with a fake
    clock instead of real time.
    """

    def __init__(self, min_interval_s: float = 1.0,
                 clock=time.monotonic, sleep=time.sleep):
        if min_interval_s < 0:
            raise GeocodeError("RateLimiter: negative interval")
        self.min_interval_s = min_interval_s
        self._clock = clock
        self._sleep = sleep
        self._last = None

    def wait(self):
        now = self._clock()
        if self._last is not None:
            remaining = self.min_interval_s - (now - self._last)
            if remaining > 0:
                self._sleep(remaining)
                now = self._clock()
        self._last = now


def cache_key(lat: float, lon: float) -> str:
    return f"{round(lat, CACHE_DECIMALS):.5f},{round(lon, CACHE_DECIMALS):.5f}"


class CoordinateCache:
    """JSON-file cache of reverse-geocode responses by rounded coordinate."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data = {}
        if self.path and self.path.exists():
            self._data = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, lat: float, lon: float):
        return self._data.get(cache_key(lat, lon))

    def put(self, lat: float, lon: float, address: dict):
        self._data[cache_key(lat, lon)] = address
        if self.path:
            self.path.write_text(json.dumps(self._data, sort_keys=True),
                                 encoding="utf-8")

    def __len__(self):
        return len(self._data)


class NominatimClient:
    """Minimal reverse-geocoding client with retry and backoff.

    A descriptive user agent is mandatory; the public service rejects
    anonymous clients.
    """

    def __init__(self, user_agent: str,
                 base_url: str = "https://nominatim.openstreetmap.org",
                 timeout_s: float = 30.0, retries: int = 2,
                 backoff_s: float = 2.0, session=None, sleep=time.sleep):
        if not user_agent:
            raise GeocodeError("NominatimClient: user_agent is required")
        self.user_agent = user_agent
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.session = session or requests.Session()
        self._sleep = sleep

    def reverse(self, lat: float, lon: float) -> dict:
        """Return the response's address mapping; {} when the service has
        nothing for the point (open water). Raises GeocodeError after
        exhausting retries."""
        params = {"lat": f"{lat:.6f}", "lon": f"{lon:.6f}",
                  "format": "jsonv2"}
        headers = {"User-Agent": self.user_agent}
        last_error = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self.session.get(f"{self.base_url}/reverse",
                                        params=params, headers=headers,
                                        timeout=self.timeout_s)
                resp.raise_for_status()
                body = resp.json()
                if "error" in body:
                    return {}
                return body.get("address", {})
            except Exception as exc:  # noqa: BLE001 - normalized below
                last_error = exc
        raise GeocodeError(f"reverse geocode failed for ({lat}, {lon}): "
                           f"{last_error}")


@dataclass
class GeocodeJob:
    """Coordinates to enrich, keyed by the image ids they belong to."""

    coordinates: list      # (img_id, lat, lon)
    rate_limit_s: float = 1.0
    cache_path: str | None = None

    def __post_init__(self):
        for img_id, lat, lon in self.coordinates:
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise GeocodeError(
                    f"GeocodeJob: {img_id} has out-of-range ({lat}, {lon})")


def _address_to_fields(address: dict) -> dict:
    out = {}
    for fld, keys in ADDRESS_KEY_MAP.items():
        value = None
        for key in keys:
            if address.get(key):
                value = str(address[key])
                break
        out[fld] = value if value is not None else "NA"
    return out


def reverse_geocode(job: GeocodeJob, client: NominatimClient,
                    limiter: RateLimiter | None = None,
                    cache: CoordinateCache | None = None):
    """Enrich every coordinate, returning (rows, errors).

    Rows follow METADATA_FIELDS. Cached coordinates cost no network call.
    A coordinate whose lookups all fail becomes an all-NA row plus an
    error note; it never aborts the batch.
    """
    limiter = limiter or RateLimiter(job.rate_limit_s)
    cache = cache or CoordinateCache(job.cache_path)
    rows = []
    errors = []
    for img_id, lat, lon in job.coordinates:
        address = cache.get(lat, lon)
        if address is None:
            limiter.wait()
            try:
                address = client.reverse(lat, lon)
            except GeocodeError as exc:
                errors.append((img_id, str(exc)))
                address = {}
            else:
                cache.put(lat, lon, address)
        row = {"img_id": img_id, "lat": lat, "lon": lon}
        row.update(_address_to_fields(address))
        rows.append(row)
    return rows, errors


def write_metadata_csv(path, rows) -> None:
    """Write enriched rows in the ingestion schema's column order."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METADATA_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "NA") for k in METADATA_FIELDS})
