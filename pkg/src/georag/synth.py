"""Data ingestion, the synthetic world fixture, embedding files, and the
end-to-end prediction pipeline.

The synthetic world is a desk-scale stand-in for a geotagged photo
corpus: clustered points on the sphere whose image embeddings mix a
shared "visual style" signature (so distant clusters can look alike), a
cluster signature, and noise. Text embeddings carry the cluster's
country signature.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from georag.alignment import (AlignmentModel, text_description,
                              vectorize_image, vectorize_images)
from georag.diversify import PromptSet, RetrievalHit, generate_candidates
from georag.errors import (DataError, FormatError, GeoragError,
                           TransportError, UsageError)
from georag.geodesy import (EARTH_RADIUS_KM, GeoPoint, ThresholdReport,
                            haversine_km, threshold_accuracy)
from georag.index import IndexRecord, VectorIndex
from georag.verify import verify

EMBED_MAGIC = b"G3EM"
EMBED_VERSION = 1

METADATA_FIELDS = ("img_id", "lat", "lon", "neighbourhood", "city", "county",
                   "state", "region", "country", "country_code", "continent")


@dataclass
class MetadataRecord:
    img_id: str
    lat: float
    lon: float
    neighbourhood: str | None = None
    city: str | None = None
    county: str | None = None
    state: str | None = None
    region: str | None = None
    country: str | None = None
    country_code: str | None = None
    continent: str | None = None

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


def _clean(value):
    if value is None:
        return None
    value = str(value).strip()
    return None if value in ("", "NA", "N/A", "nan") else value


def _record_from_mapping(row: dict, line_no: int) -> MetadataRecord:
    img_id = _clean(row.get("img_id"))
    if not img_id:
        raise DataError(f"line {line_no}: missing img_id")
    try:
        lat = float(row["lat"])
        lon = float(row["lon"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"line {line_no}: missing or non-numeric lat/lon")
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise DataError(f"line {line_no}: coordinates out of range ({lat}, {lon})")
    extras = {f: _clean(row.get(f)) for f in METADATA_FIELDS[3:]}
    return MetadataRecord(img_id, lat, lon, **extras)


def ingest_metadata(path, fmt: str | None = None):
    """Read CSV or JSON-lines metadata.

    Returns (records, errors) where errors are per-row messages with line
    numbers. More than 10% malformed rows, or an empty file, is a hard
    error.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".ndjson", ".json") else "csv"
    records, errors = [], []
    total = 0
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for line_no, row in enumerate(reader, start=2):
                total += 1
                try:
                    records.append(_record_from_mapping(row, line_no))
                except DataError as exc:
                    errors.append(str(exc))
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                total += 1
                try:
                    records.append(_record_from_mapping(json.loads(line), line_no))
                except (json.JSONDecodeError, DataError) as exc:
                    errors.append(f"line {line_no}: {exc}"
                                  if not str(exc).startswith("line") else str(exc))
    else:
        raise UsageError(f"ingest_metadata: unknown format {fmt!r}")
    if total == 0:
        raise DataError(f"{path}: no data rows")
    if len(errors) > 0.10 * total:
        raise DataError(
            f"{path}: {len(errors)}/{total} malformed rows exceeds the 10% budget; "
            f"first error: {errors[0]}")
    return records, errors


def write_embedding_file(path, dim: int, rows) -> None:
    """Write (img_id, vector) rows in the "G3EM" binary format."""
    rows = list(rows)
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<IIQ", EMBED_VERSION, dim, len(rows)))
        for img_id, vec in rows:
            data = np.ascontiguousarray(vec, dtype="<f4")
            if data.shape != (dim,):
                raise UsageError(f"embedding {img_id}: dim {data.shape} != {dim}")
            enc = img_id.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(data.tobytes())


def read_embedding_file(path):
    """Read a "G3EM" file, returning (ids, (n, dim) float32 matrix)."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated embedding file")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic, not an embedding file")
    version, dim, count = struct.unpack("<IIQ", take(16))
    if version != EMBED_VERSION:
        raise FormatError(f"{path}: unsupported embedding version {version}")
    ids = []
    matrix = np.empty((count, dim), dtype=np.float32)
    for row in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        ids.append(take(nlen).decode("utf-8"))
        matrix[row] = np.frombuffer(take(4 * dim), dtype="<f4")
    if off != len(blob):
        raise FormatError(f"{path}: trailing bytes")
    return ids, matrix


@dataclass
class SyntheticWorldConfig:
    seed: int = 0
    n_clusters: int = 8
    points_per_cluster: int = 256
    embedding_noise_sigma: float = 1.0
    cluster_radius_km: float = 50.0
    style_count: int = 0          # 0 -> n_clusters // 2, min 2
    cluster_signal: float = 0.5   # weight of the cluster-specific component
    min_cluster_separation_km: float = 1500.0

    def __post_init__(self):
        if self.n_clusters <= 0 or self.points_per_cluster <= 0:
            raise UsageError("SyntheticWorldConfig: counts must be positive")
        if not 0 < self.cluster_radius_km < 2500.0:
            raise UsageError("SyntheticWorldConfig: radius must be in (0, 2500) km")


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    records: list
    image_emb: np.ndarray  # (n, 768) float32
    text_emb: np.ndarray   # (n, 768) float32
    cluster_of: np.ndarray

    @property
    def points(self) -> list[GeoPoint]:
        return [r.point for r in self.records]

    def __len__(self):
        return len(self.records)


def _sample_centers(rng, config: SyntheticWorldConfig) -> list[GeoPoint]:
    centers = []
    attempts = 0
    while len(centers) < config.n_clusters:
        attempts += 1
        if attempts > 10000:
            raise UsageError("synthesize_world: cannot place separated clusters; "
                             "reduce n_clusters or min separation")
        cand = GeoPoint(rng.uniform(-60.0, 60.0), rng.uniform(-175.0, 175.0))
        if all(haversine_km(cand, c) >= config.min_cluster_separation_km
               for c in centers):
            centers.append(cand)
    return centers


def _offset_point(center: GeoPoint, dist_km: float, bearing_rad: float) -> GeoPoint:
    dlat = (dist_km / EARTH_RADIUS_KM) * math.cos(bearing_rad)
    coslat = math.cos(math.radians(center.lat_deg))
    dlon = (dist_km / EARTH_RADIUS_KM) * math.sin(bearing_rad) / max(coslat, 1e-6)
    lat = max(-90.0, min(90.0, center.lat_deg + math.degrees(dlat)))
    lon = center.lon_deg + math.degrees(dlon)
    lon = (lon + 180.0) % 360.0 - 180.0
    return GeoPoint(lat, lon)


def synthesize_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    """Deterministic clustered world with controllable visual ambiguity."""
    rng = np.random.default_rng(config.seed)
    centers = _sample_centers(rng, config)
    n_styles = config.style_count or max(2, config.n_clusters // 2)
    style_sigs = rng.normal(0.0, 1.0, size=(n_styles, 768))
    cluster_sigs = rng.normal(0.0, 1.0, size=(config.n_clusters, 768))
    country_sigs = rng.normal(0.0, 1.0, size=(config.n_clusters, 768))

    records, image_rows, text_rows, cluster_of = [], [], [], []
    for c, center in enumerate(centers):
        style = c % n_styles
        for i in range(config.points_per_cluster):
            dist = config.cluster_radius_km * math.sqrt(rng.uniform())
            bearing = rng.uniform(0.0, 2.0 * math.pi)
            p = _offset_point(center, dist, bearing)
            records.append(MetadataRecord(
                img_id=f"img_{c:02d}_{i:04d}", lat=p.lat_deg, lon=p.lon_deg,
                city=f"City {c}", country=f"Country {c}",
                country_code=f"c{c:02d}"))
            noise = rng.normal(0.0, 1.0, size=768)
            image_rows.append(style_sigs[style]
                              + config.cluster_signal * cluster_sigs[c]
                              + config.embedding_noise_sigma * noise)
            text_rows.append(country_sigs[c])
            cluster_of.append(c)
    return SyntheticWorld(
        config, records,
        np.array(image_rows, dtype=np.float32),
        np.array(text_rows, dtype=np.float32),
        np.array(cluster_of, dtype=np.int64),
    )


def save_world(world: SyntheticWorld, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metadata.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METADATA_FIELDS)
        writer.writeheader()
        for r in world.records:
            row = asdict(r)
            writer.writerow({k: ("NA" if v is None else v) for k, v in row.items()})
    ids = [r.img_id for r in world.records]
    write_embedding_file(out_dir / "image_emb.g3em", 768,
                         zip(ids, world.image_emb))
    write_embedding_file(out_dir / "text_emb.g3em", 768,
                         zip(ids, world.text_emb))
    with open(out_dir / "world.json", "w", encoding="utf-8") as f:
        json.dump(asdict(world.config), f, indent=2)


def load_world_data(data_dir):
    """Load (records, image_emb, text_emb) from a saved world directory,
    rows aligned by img_id."""
    data_dir = Path(data_dir)
    records, errors = ingest_metadata(data_dir / "metadata.csv")
    if errors:
        raise DataError(f"{data_dir}: malformed metadata rows: {errors[:3]}")
    ids_img, image_emb = read_embedding_file(data_dir / "image_emb.g3em")
    ids_txt, text_emb = read_embedding_file(data_dir / "text_emb.g3em")
    by_id_img = {i: r for r, i in enumerate(ids_img)}
    by_id_txt = {i: r for r, i in enumerate(ids_txt)}
    try:
        img_rows = [by_id_img[r.img_id] for r in records]
        txt_rows = [by_id_txt[r.img_id] for r in records]
    except KeyError as exc:
        raise DataError(f"{data_dir}: embedding missing for id {exc}")
    return records, image_emb[img_rows], text_emb[txt_rows]


def build_index_from_embeddings(records, image_emb: np.ndarray,
                                model: AlignmentModel) -> VectorIndex:
    """Vectorize images with the trained model and fill a 2048-dim index."""
    vectors = vectorize_images(image_emb, model)
    index = VectorIndex(dim=vectors.shape[1])
    index.add([IndexRecord(i, vectors[i], r.point, text_description(r))
               for i, r in enumerate(records)])
    return index


def normalized_image_vectors(image_emb: np.ndarray) -> np.ndarray:
    """Unit-normalized copies of raw image embeddings, float32."""
    norms = np.linalg.norm(image_emb.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UsageError("normalized_image_vectors: zero-norm embedding row")
    return (image_emb / norms).astype(np.float32)


def build_raw_index(records, image_emb: np.ndarray) -> VectorIndex:
    """Index over the frozen image embeddings alone (the unaligned baseline)."""
    vectors = normalized_image_vectors(image_emb)
    index = VectorIndex(dim=image_emb.shape[1])
    index.add([IndexRecord(i, vectors[i], r.point, text_description(r))
               for i, r in enumerate(records)])
    return index


@dataclass
class PipelineResult:
    predictions: list
    report: ThresholdReport | None
    failures: list = field(default_factory=list)


def _hits_for(index: VectorIndex, query_vec: np.ndarray, k: int):
    raw = index.search_flat(query_vec, k)
    return [RetrievalHit(rid, score, index.record(rid).point)
            for rid, score in raw]


def run_pipeline(queries, model: AlignmentModel, index: VectorIndex, client,
                 prompt_set: PromptSet, seed: int = 0,
                 truths: list | None = None) -> PipelineResult:
    """Vectorize, retrieve, diversify, and verify each query.

    `queries` is a list of (img_id, image embedding). Per-query failures
    are recorded and excluded from the report denominator, never silently
    dropped.
    """
    k = max(prompt_set.max_references, 1)
    predictions, failures, pred_points, truth_points = [], [], [], []
    for qi, (img_id, image_emb) in enumerate(queries):
        try:
            query_vec = vectorize_image(image_emb, model)
            hits = _hits_for(index, query_vec, k)
            pool = generate_candidates(client, img_id, prompt_set, hits,
                                       query_vec=query_vec, index=index,
                                       seed=seed + qi)
            if len(pool) == 0:
                raise DataError("all candidates dropped")
            verdict = verify(image_emb, pool, model)
        except TransportError:
            # a dead endpoint fails the whole run, not one query at a time
            raise
        except GeoragError as exc:
            failures.append({"img_id": img_id, "error": str(exc)})
            continue
        chosen = pool.candidates[verdict.chosen_index]
        predictions.append({
            "img_id": img_id,
            "pred_lat": verdict.chosen.lat_deg,
            "pred_lon": verdict.chosen.lon_deg,
            "chosen_provenance": chosen.provenance.label(),
            "pool_size": len(pool),
        })
        pred_points.append(verdict.chosen)
        if truths is not None:
            truth_points.append(truths[qi])
    report = None
    if truths is not None and pred_points:
        report = threshold_accuracy(pred_points, truth_points)
    return PipelineResult(predictions, report, failures)


def retrieval_distance_stats(index: VectorIndex, query_vecs: np.ndarray,
                             truths, top_ns=(5, 10, 15)) -> dict:
    """Mean over queries of avg/median/max/min top-n retrieval distance."""
    per_n = {n: {"avg": [], "md": [], "max": [], "min": []} for n in top_ns}
    max_n = max(top_ns)
    for q in range(query_vecs.shape[0]):
        hits = index.search_flat(query_vecs[q], max_n)
        dists = [haversine_km(truths[q], index.record(rid).point)
                 for rid, _ in hits]
        for n in top_ns:
            sub = dists[:n]
            per_n[n]["avg"].append(float(np.mean(sub)))
            per_n[n]["md"].append(float(np.median(sub)))
            per_n[n]["max"].append(float(np.max(sub)))
            per_n[n]["min"].append(float(np.min(sub)))
    return {n: {stat: float(np.mean(vals)) for stat, vals in stats.items()}
            for n, stats in per_n.items()}


def compare_retrieval(raw_index: VectorIndex, aligned_index: VectorIndex,
                      raw_queries: np.ndarray, aligned_queries: np.ndarray,
                      truths, top_ns=(5, 10, 15)) -> dict:
    """Retrieval-distance statistics for raw vs aligned embeddings."""
    return {
        "raw": retrieval_distance_stats(raw_index, raw_queries, truths, top_ns),
        "aligned": retrieval_distance_stats(aligned_index, aligned_queries,
                                            truths, top_ns),
    }
