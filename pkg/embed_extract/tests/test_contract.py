"""Cross-component contract: files this package emits must ingest cleanly
into the retrieval pipeline's readers. This test imports the consumer
side (georag) as the contract harness; the packages themselves share only
the file formats."""

import numpy as np

from embed_extract.embed import ExtractJob, FakeEncoder, extract_embeddings
from embed_extract.geocode import (GeocodeJob, RateLimiter, reverse_geocode,
                                   write_metadata_csv)
from georag import synth

from test_geocode import FakeResponse, FakeSession, make_client


def test_golden_file_contract(tmp_path):
    ids = ["img_a", "img_b", "img_c"]
    coords = [("img_a", 47.217578, 7.542092),
              ("img_b", 39.950477, -75.157535),
              ("img_c", -34.580413, -58.425512)]

    emb_path = tmp_path / "image_emb.g3em"
    manifest = extract_embeddings(
        ExtractJob(items=ids, out_path=str(emb_path)), FakeEncoder())
    assert manifest.skipped == []

    bodies = [FakeResponse({"address": {"city": "Solothurn",
                                        "country": "Switzerland",
                                        "country_code": "ch"}}),
              FakeResponse({"address": {"city": "Philadelphia",
                                        "state": "Pennsylvania",
                                        "country": "United States",
                                        "country_code": "us"}}),
              FakeResponse({"address": {"city": "Buenos Aires",
                                        "country": "Argentina",
                                        "country_code": "ar"}})]
    rows, errors = reverse_geocode(GeocodeJob(coords),
                                   make_client(FakeSession(bodies)),
                                   RateLimiter(0.0))
    assert errors == []
    csv_path = tmp_path / "metadata.csv"
    write_metadata_csv(csv_path, rows)

    # consumer side: both files ingest without a single malformed row
    records, ingest_errors = synth.ingest_metadata(csv_path)
    assert ingest_errors == []
    assert [r.img_id for r in records] == ids
    assert records[0].city == "Solothurn"
    assert records[0].neighbourhood is None  # NA arrives as missing
    assert records[1].state == "Pennsylvania"

    read_ids, matrix = synth.read_embedding_file(emb_path)
    assert read_ids == ids
    assert matrix.shape == (3, 768)
    assert matrix.dtype == np.float32
    assert np.isfinite(matrix).all()


def test_embeddings_join_metadata_by_id(tmp_path):
    """The ingestion-side join (load_world_data) accepts a directory
    assembled entirely from this package's outputs."""
    ids = ["p1", "p2"]
    coords = [("p1", 10.0, 20.0), ("p2", -5.0, 30.0)]
    out = tmp_path / "world"
    out.mkdir()

    extract_embeddings(ExtractJob(items=ids,
                                  out_path=str(out / "image_emb.g3em")),
                       FakeEncoder())
    extract_embeddings(ExtractJob(items=ids,
                                  out_path=str(out / "text_emb.g3em")),
                       FakeEncoder())
    bodies = [FakeResponse({"address": {"country": "A"}}),
              FakeResponse({"address": {"country": "B"}})]
    rows, _ = reverse_geocode(GeocodeJob(coords),
                              make_client(FakeSession(bodies)),
                              RateLimiter(0.0))
    write_metadata_csv(out / "metadata.csv", rows)

    records, image_emb, text_emb = synth.load_world_data(out)
    assert [r.img_id for r in records] == ids
    assert image_emb.shape == text_emb.shape == (2, 768)
    assert records[0].country == "A" and records[1].country == "B"
