"""Persistent vector store with exact inner-product search and an
IVF-style approximate index.

Scores are computed in float64 through one shared routine so the flat and
IVF paths agree bit-for-bit when every cluster is probed. Ties break by
ascending id. Files use the little-endian "G3IX" format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from georag.errors import FormatError, UsageError
from georag.geodesy import GeoPoint

INDEX_MAGIC = b"G3IX"
INDEX_VERSION = 1
METRIC_INNER_PRODUCT = 0

VECTOR_DIM = 2048
UNIT_NORM_TOL = 1e-5


@dataclass
class IndexRecord:
    id: int
    vector: np.ndarray  # unit norm
    point: GeoPoint
    text: str


@dataclass
class IvfParams:
    n_clusters: int
    kmeans_iters: int = 20
    seed: int = 0
    nprobe: int = 1

    def __post_init__(self):
        if self.n_clusters < 1:
            raise UsageError("IvfParams: n_clusters must be >= 1")
        if not 1 <= self.nprobe <= self.n_clusters:
            raise UsageError("IvfParams: nprobe out of [1, n_clusters]")


def _check_unit(vec: np.ndarray, what: str):
    if vec.ndim != 1:
        raise UsageError(f"{what}: expected 1-d vector")
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise UsageError(f"{what}: vector norm {norm:.6f} not within "
                         f"{UNIT_NORM_TOL} of 1")


class VectorIndex:
    """In-memory index of IndexRecords; single writer, many readers."""

    def __init__(self, dim: int = VECTOR_DIM):
        self.dim = dim
        self._ids = np.empty(0, dtype=np.int64)
        self._vectors = np.empty((0, dim), dtype=np.float32)
        self._lats = np.empty(0, dtype=np.float64)
        self._lons = np.empty(0, dtype=np.float64)
        self._texts: list[str] = []
        self._id_to_row: dict[int, int] = {}
        self._ivf_params: IvfParams | None = None
        self._centroids: np.ndarray | None = None
        self._lists: list[np.ndarray] | None = None

    def __len__(self):
        return len(self._ids)

    def add(self, records: list[IndexRecord]) -> int:
        """Validate and append records; on any error the index is unchanged."""
        seen = set(self._id_to_row)
        for rec in records:
            if rec.id in seen:
                raise UsageError(f"duplicate record id {rec.id}")
            seen.add(rec.id)
            if rec.vector.shape != (self.dim,):
                raise UsageError(
                    f"record {rec.id}: vector dim {rec.vector.shape} != {self.dim}")
            _check_unit(rec.vector, f"record {rec.id}")
        base = len(self._ids)
        self._ids = np.concatenate(
            [self._ids, np.array([r.id for r in records], dtype=np.int64)])
        self._vectors = np.vstack(
            [self._vectors] + [r.vector.astype(np.float32)[None, :] for r in records]) \
            if records else self._vectors
        self._lats = np.concatenate(
            [self._lats, np.array([r.point.lat_deg for r in records])])
        self._lons = np.concatenate(
            [self._lons, np.array([r.point.lon_deg for r in records])])
        self._texts.extend(r.text for r in records)
        for i, rec in enumerate(records):
            self._id_to_row[rec.id] = base + i
        # stored posting lists no longer cover the new rows
        self._ivf_params = None
        self._centroids = None
        self._lists = None
        return len(records)

    def record(self, rec_id: int) -> IndexRecord:
        row = self._id_to_row.get(rec_id)
        if row is None:
            raise UsageError(f"unknown record id {rec_id}")
        return IndexRecord(rec_id, self._vectors[row],
                           GeoPoint(self._lats[row], self._lons[row]),
                           self._texts[row])

    def _score_rows(self, rows: np.ndarray, query: np.ndarray) -> np.ndarray:
        # one shared float64 scoring path keeps flat and IVF bit-identical
        return self._vectors[rows].astype(np.float64) @ query.astype(np.float64)

    def _rank(self, rows: np.ndarray, query: np.ndarray, k: int):
        scores = self._score_rows(rows, query)
        ids = self._ids[rows]
        order = np.lexsort((ids, -scores))[:k]
        return [(int(ids[i]), float(scores[i])) for i in order]

    def search_flat(self, query: np.ndarray, k: int):
        """Exact top-k by inner product, descending; ties by ascending id."""
        if k < 1:
            raise UsageError("search_flat: k must be >= 1")
        _check_unit(query, "query")
        return self._rank(np.arange(len(self._ids)), query, k)

    def build_ivf(self, params: IvfParams) -> None:
        """Cluster the stored vectors with seeded k-means."""
        n = len(self._ids)
        if params.n_clusters > n:
            raise UsageError(
                f"build_ivf: n_clusters {params.n_clusters} > record count {n}")
        data = self._vectors.astype(np.float64)
        rng = np.random.default_rng(params.seed)
        centroids = data[rng.choice(n, size=params.n_clusters, replace=False)].copy()
        assign = np.full(n, -1, dtype=np.int64)
        for _it in range(params.kmeans_iters):
            # memory-lean squared distances via the expanded form
            d2 = (np.einsum("ij,ij->i", data, data)[:, None]
                  - 2.0 * data @ centroids.T
                  + np.einsum("ij,ij->i", centroids, centroids)[None, :])
            new_assign = d2.argmin(axis=1)
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for c in range(params.n_clusters):
                members = data[assign == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
                else:
                    # re-seed empty clusters on the point farthest from its centroid
                    worst = int(d2[np.arange(n), assign].argmax())
                    centroids[c] = data[worst]
                    assign[worst] = c
        self._ivf_params = params
        self._centroids = centroids
        self._lists = [np.flatnonzero(assign == c) for c in range(params.n_clusters)]

    def search_ivf(self, query: np.ndarray, k: int, nprobe: int | None = None):
        """Approximate top-k probing the nprobe nearest clusters."""
        if self._lists is None:
            raise UsageError("search_ivf: build_ivf has not been run")
        params = self._ivf_params
        nprobe = params.nprobe if nprobe is None else nprobe
        if not 1 <= nprobe <= params.n_clusters:
            raise UsageError(f"search_ivf: nprobe {nprobe} out of range")
        if k < 1:
            raise UsageError("search_ivf: k must be >= 1")
        _check_unit(query, "query")
        q = query.astype(np.float64)
        cdist = ((self._centroids - q) ** 2).sum(axis=1)
        probes = np.argsort(cdist, kind="stable")[:nprobe]
        rows = np.concatenate([self._lists[c] for c in probes]) \
            if len(probes) else np.empty(0, dtype=np.int64)
        if rows.size == 0:
            return []
        return self._rank(rows, query, k)

    def sample_ids(self, n: int, seed: int) -> np.ndarray:
        """Seeded sample of record ids (without replacement when possible)."""
        count = len(self._ids)
        rng = np.random.default_rng(seed)
        take = min(n, count)
        rows = rng.choice(count, size=take, replace=False)
        return self._ids[rows]

    # ---- persistence -------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<IIIQ", INDEX_VERSION, METRIC_INNER_PRODUCT,
                                self.dim, len(self._ids)))
            for row in range(len(self._ids)):
                f.write(struct.pack("<q", int(self._ids[row])))
                f.write(self._vectors[row].astype("<f4").tobytes())
                f.write(struct.pack("<dd", float(self._lats[row]),
                                    float(self._lons[row])))
                text = self._texts[row].encode("utf-8")
                f.write(struct.pack("<I", len(text)))
                f.write(text)
            if self._lists is not None:
                p = self._ivf_params
                f.write(struct.pack("<IIIQ", p.n_clusters, p.kmeans_iters,
                                    p.nprobe, p.seed))
                f.write(self._centroids.astype("<f8").tobytes())
                for lst in self._lists:
                    f.write(struct.pack("<Q", len(lst)))
                    f.write(lst.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "VectorIndex":
        with open(path, "rb") as f:
            blob = f.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise FormatError(f"{path}: truncated index file")
            chunk = blob[off:off + n]
            off += n
            return chunk

        if take(4) != INDEX_MAGIC:
            raise FormatError(f"{path}: bad magic, not an index file")
        version, metric, dim, count = struct.unpack("<IIIQ", take(20))
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        if metric != METRIC_INNER_PRODUCT:
            raise FormatError(f"{path}: unknown metric tag {metric}")
        idx = cls(dim=dim)
        ids = np.empty(count, dtype=np.int64)
        vectors = np.empty((count, dim), dtype=np.float32)
        lats = np.empty(count, dtype=np.float64)
        lons = np.empty(count, dtype=np.float64)
        texts = []
        for row in range(count):
            (ids[row],) = struct.unpack("<q", take(8))
            vectors[row] = np.frombuffer(take(4 * dim), dtype="<f4")
            lats[row], lons[row] = struct.unpack("<dd", take(16))
            (tlen,) = struct.unpack("<I", take(4))
            texts.append(take(tlen).decode("utf-8"))
        idx._ids = ids
        idx._vectors = vectors
        idx._lats = lats
        idx._lons = lons
        idx._texts = texts
        idx._id_to_row = {int(i): r for r, i in enumerate(ids)}
        if off < len(blob):
            n_clusters, iters, nprobe, seed = struct.unpack("<IIIQ", take(20))
            centroids = np.frombuffer(take(8 * n_clusters * dim),
                                      dtype="<f8").reshape(n_clusters, dim).copy()
            lists = []
            for _ in range(n_clusters):
                (llen,) = struct.unpack("<Q", take(8))
                lists.append(np.frombuffer(take(8 * llen), dtype="<i8").copy())
            idx._ivf_params = IvfParams(n_clusters, iters, seed, nprobe)
            idx._centroids = centroids
            idx._lists = lists
        if off != len(blob):
            raise FormatError(f"{path}: trailing bytes in index file")
        return idx
