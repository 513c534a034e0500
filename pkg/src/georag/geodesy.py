"""Coordinate projection, great-circle distance, and the threshold metric.

All functions are pure and operate in 64-bit floating point. Distances are
haversine on a sphere of radius 6371.0088 km; the projection is Mercator
with the configurable radius defaulting to 6378137.0 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from georag.errors import UsageError

#: Default Mercator projection radius, meters.
EARTH_RADIUS_M = 6378137.0

#: Mean Earth radius used for great-circle distances, kilometers.
EARTH_RADIUS_KM = 6371.0088

#: Latitude clamp before projection; Mercator diverges at the poles.
MAX_MERCATOR_LAT_DEG = 85.05113

#: Evaluation thresholds, km (street / city / region / country / continent).
THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)


@dataclass(frozen=True)
class GeoPoint:
    """A latitude/longitude pair in degrees."""

    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and math.isfinite(self.lon_deg)):
            raise UsageError(f"non-finite coordinate: ({self.lat_deg}, {self.lon_deg})")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise UsageError(f"latitude out of range: {self.lat_deg}")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise UsageError(f"longitude out of range: {self.lon_deg}")


@dataclass(frozen=True)
class PlanePoint:
    """Projected plane coordinates in meters (x east, y north)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise UsageError(f"non-finite plane point: ({self.x}, {self.y})")


@dataclass(frozen=True)
class ThresholdReport:
    """Fraction of predictions within each distance threshold."""

    thresholds_km: tuple
    fractions: tuple
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "thresholds_km": list(self.thresholds_km),
            "fractions": list(self.fractions),
            "n_samples": self.n_samples,
        }


def mercator_project(p: GeoPoint, lambda0_deg: float = 0.0,
                     radius_m: float = EARTH_RADIUS_M) -> PlanePoint:
    """Project a point with the conformal Mercator projection.

    Latitude is clamped to +-85.05113 degrees so y stays finite.
    """
    lat = max(-MAX_MERCATOR_LAT_DEG, min(MAX_MERCATOR_LAT_DEG, p.lat_deg))
    lam = math.radians(p.lon_deg)
    lam0 = math.radians(lambda0_deg)
    phi = math.radians(lat)
    x = radius_m * (lam - lam0)
    # asinh(tan(phi)) == ln(tan(pi/4 + phi/2)) but is exact at the equator
    y = radius_m * math.asinh(math.tan(phi))
    return PlanePoint(x, y)


def mercator_unproject(p: PlanePoint, lambda0_deg: float = 0.0,
                       radius_m: float = EARTH_RADIUS_M) -> GeoPoint:
    """Exact analytic inverse of :func:`mercator_project`."""
    lon = math.degrees(p.x / radius_m) + lambda0_deg
    lat = math.degrees(2.0 * math.atan(math.exp(p.y / radius_m)) - math.pi / 2.0)
    # guard rounding at the clamp/antimeridian boundary
    lat = max(-90.0, min(90.0, lat))
    lon = max(-180.0, min(180.0, lon))
    return GeoPoint(lat, lon)


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points, kilometers."""
    phi1 = math.radians(a.lat_deg)
    phi2 = math.radians(b.lat_deg)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon_deg - a.lon_deg)
    h = (math.sin(dphi / 2.0) ** 2
         + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2)
    h = min(1.0, h)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def threshold_accuracy(preds: Sequence[GeoPoint], truths: Sequence[GeoPoint],
                       thresholds_km: Sequence[float] = THRESHOLDS_KM) -> ThresholdReport:
    """Fraction of prediction/truth pairs within each distance threshold."""
    if len(preds) == 0:
        raise UsageError("threshold_accuracy: empty input")
    if len(preds) != len(truths):
        raise UsageError(
            f"threshold_accuracy: length mismatch {len(preds)} vs {len(truths)}")
    dists = [haversine_km(p, t) for p, t in zip(preds, truths)]
    n = len(dists)
    fractions = tuple(sum(1 for d in dists if d <= thr) / n for thr in thresholds_km)
    return ThresholdReport(tuple(thresholds_km), fractions, n)
