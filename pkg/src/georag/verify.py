"""Candidate verification: score every pool coordinate against the query
image in the learned image-GPS space and return the argmax.

Both sides are L2-normalized before the inner product so scoring matches
the normalization used during training. Ties break by lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from georag.alignment import AlignmentModel
from georag.diversify import CandidatePool
from georag.errors import UsageError
from georag.geodesy import GeoPoint
from georag.nn import mlp_forward


@dataclass
class Verdict:
    chosen: GeoPoint
    scores: list
    chosen_index: int


def verify(image_emb: np.ndarray, pool: CandidatePool,
           model: AlignmentModel) -> Verdict:
    """Pick the pool candidate most similar to the image in GPS space."""
    if len(pool) == 0:
        raise UsageError("verify: empty candidate pool")
    img_gps, _ = mlp_forward(model.img_gps_spec, model.img_gps_head,
                             np.atleast_2d(image_emb))
    e_img = img_gps[0].astype(np.float64)
    norm = np.linalg.norm(e_img)
    if norm == 0:
        raise UsageError("verify: zero-norm image embedding")
    e_img = e_img / norm
    cand_emb, _ = model.gps_encoder.forward(pool.points())
    cand_emb = cand_emb.astype(np.float64)
    norms = np.linalg.norm(cand_emb, axis=1)
    if np.any(norms == 0):
        raise UsageError("verify: zero-norm candidate embedding")
    scores = (cand_emb / norms[:, None]) @ e_img
    chosen_index = int(np.argmax(scores))  # argmax keeps the lowest index on ties
    return Verdict(pool.candidates[chosen_index].point,
                   [float(s) for s in scores], chosen_index)
