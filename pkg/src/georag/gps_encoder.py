"""GPS coordinate encoder: Mercator projection, hierarchical random
Fourier features, and per-hierarchy MLPs whose outputs are summed.

The frequency matrices are sampled once from seeded Gaussians and frozen;
only the per-hierarchy MLPs train. Plane coordinates are scaled by
1/(pi*R) so the inputs to the feature map lie in roughly [-1, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from georag.errors import UsageError
from georag.geodesy import EARTH_RADIUS_M, GeoPoint, mercator_project
from georag.nn import DenseLayer, MlpSpec, init_mlp, mlp_backward, mlp_forward

#: Feature dimension of one hierarchy's gamma transform (cos half + sin half).
RFF_DIM = 512

#: Hidden width / output width of each per-hierarchy MLP.
FK_HIDDEN = 1024
GPS_EMBED_DIM = 512


def sigma_schedule(n: int, sigma_min: float, sigma_max: float) -> list[float]:
    """Geometric interpolation between sigma_min and sigma_max in log2 space."""
    if n < 2:
        raise UsageError("sigma_schedule: need n >= 2")
    if not 0 < sigma_min < sigma_max:
        raise UsageError("sigma_schedule: require 0 < sigma_min < sigma_max")
    lo = math.log2(sigma_min)
    hi = math.log2(sigma_max)
    return [2.0 ** (lo + (k - 1) * (hi - lo) / (n - 1)) for k in range(1, n + 1)]


@dataclass
class HierarchySpec:
    n_hierarchies: int = 3
    sigma_min: float = 1.0     # 2**0
    sigma_max: float = 256.0   # 2**8

    @property
    def sigmas(self) -> list[float]:
        return sigma_schedule(self.n_hierarchies, self.sigma_min, self.sigma_max)


@dataclass
class RffMatrix:
    """Frozen Gaussian frequency matrix for one hierarchy."""

    entries: np.ndarray  # (RFF_DIM/2, 2)
    seed: int
    sigma: float


def sample_rff(sigma: float, seed: int, dim: int = RFF_DIM) -> RffMatrix:
    rng = np.random.default_rng(seed)
    entries = rng.normal(0.0, sigma, size=(dim // 2, 2)).astype(np.float32)
    return RffMatrix(entries, seed, sigma)


def rff_features(xy: np.ndarray, m: RffMatrix) -> np.ndarray:
    """[cos(2*pi*M*p), sin(2*pi*M*p)] with one shared matrix for both halves.

    Accepts a single (2,) point or an (n, 2) batch, pre-scaled to [-1, 1]^2.
    """
    single = xy.ndim == 1
    pts = np.atleast_2d(xy)
    if pts.shape[1] != 2:
        raise UsageError("rff_features: expected 2-d plane coordinates")
    z = 2.0 * np.pi * (pts @ m.entries.T.astype(pts.dtype))
    feats = np.concatenate([np.cos(z), np.sin(z)], axis=1)
    return feats[0] if single else feats


@dataclass
class GpsEncoder:
    """Hierarchy of frozen RFF matrices and trainable MLPs, summed."""

    hierarchy: HierarchySpec
    rff: list[RffMatrix]
    mlps: list[list[DenseLayer]]
    spec: MlpSpec = field(
        default_factory=lambda: MlpSpec([RFF_DIM, FK_HIDDEN, GPS_EMBED_DIM]))
    radius_m: float = EARTH_RADIUS_M
    lambda0_deg: float = 0.0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for layers in self.mlps:
            for layer in layers:
                out.extend([layer.weight, layer.bias])
        return out

    def scale_points(self, points: list[GeoPoint], dtype=np.float32) -> np.ndarray:
        """Project and scale coordinates to the feature map's input range."""
        planes = np.array(
            [(pp.x, pp.y) for pp in
             (mercator_project(p, self.lambda0_deg, self.radius_m) for p in points)],
            dtype=np.float64)
        return (planes / (math.pi * self.radius_m)).astype(dtype)

    def forward(self, points: list[GeoPoint], dtype=np.float32):
        """Encode a batch of points, returning (embeddings, cache)."""
        scaled = self.scale_points(points, dtype=dtype)
        caches = []
        total = None
        for m, layers in zip(self.rff, self.mlps):
            feats = rff_features(scaled, m).astype(dtype)
            out, cache = mlp_forward(self.spec, layers, feats)
            caches.append(cache)
            total = out if total is None else total + out
        return total, caches

    def backward(self, caches, upstream_grad: np.ndarray) -> list[np.ndarray]:
        """Gradients for all MLP params, aligned with :attr:`params`."""
        grads = []
        for cache in caches:
            layer_grads, _ = mlp_backward(cache, upstream_grad)
            for dw, db in layer_grads:
                grads.extend([dw, db])
        return grads


def build_gps_encoder(hierarchy: HierarchySpec, seed: int, dtype=np.float32,
                      rff_dim: int = RFF_DIM, hidden_dim: int = FK_HIDDEN,
                      out_dim: int = GPS_EMBED_DIM) -> GpsEncoder:
    """Seeded construction; RFF seeds derive deterministically from `seed`."""
    sigmas = hierarchy.sigmas
    rng = np.random.default_rng(seed)
    rff = [sample_rff(s, seed=int(seed * 1000 + k), dim=rff_dim)
           for k, s in enumerate(sigmas)]
    spec = MlpSpec([rff_dim, hidden_dim, out_dim])
    mlps = [init_mlp(spec, rng, dtype=dtype) for _ in sigmas]
    return GpsEncoder(hierarchy, rff, mlps, spec)


def encode_gps(point: GeoPoint, encoder: GpsEncoder,
               dtype=np.float32) -> np.ndarray:
    """Encode one point to its 512-dim embedding."""
    out, _ = encoder.forward([point], dtype=dtype)
    return out[0]
