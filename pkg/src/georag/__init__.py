"""Geography-aware multimodal retrieval and generation pipeline.

Subpackages cover coordinate geodesy, a minimal dense-network core with
manual backpropagation, hierarchical random-Fourier GPS encoding,
contrastive tri-modal alignment, a persistent vector index, prompt-ensemble
candidate generation, candidate verification, and the evaluation CLI.
"""

from georag.geodesy import GeoPoint, PlanePoint, ThresholdReport, haversine_km

__all__ = ["GeoPoint", "PlanePoint", "ThresholdReport", "haversine_km"]

__version__ = "0.1.0"
