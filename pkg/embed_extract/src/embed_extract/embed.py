"""Batch embedding extraction into the shared "G3EM" binary format.

The encoder is pluggable: anything with encode_batch(items) -> (n, dim)
float32 works, so tests can swap in a deterministic fake while production
plugs in a real dual-encoder wrapper. Unreadable items are skipped and
recorded in the manifest rather than failing the whole job.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from embed_extract.errors import ExtractError

EMBED_MAGIC = b"G3EM"
EMBED_VERSION = 1

#: Output width of the frozen dual encoder consumed downstream.
EMBED_DIM = 768


def write_embedding_file(path, dim: int, rows) -> None:
    """Write (item_id, vector) rows in the "G3EM" layout.

    Little-endian: magic, version u32, dim u32, count u64, then per row
    id length u32, UTF-8 id, float32 data.
    """
    rows = list(rows)
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<IIQ", EMBED_VERSION, dim, len(rows)))
        for item_id, vec in rows:
            data = np.asarray(vec, dtype="<f4")
            if data.shape != (dim,):
                raise ExtractError(
                    f"embedding {item_id}: shape {data.shape}, expected ({dim},)")
            enc = item_id.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(data.tobytes())


@dataclass
class ExtractJob:
    """One extraction run: where the items are and where the file goes."""

    items: list            # item ids (paths or opaque ids the encoder accepts)
    out_path: str
    batch_size: int = 32
    dim: int = EMBED_DIM
    device: str = "cpu"    # hint passed through to the encoder

    def __post_init__(self):
        if self.batch_size < 1:
            raise ExtractError("ExtractJob: batch_size must be >= 1")
        if self.dim != EMBED_DIM:
            raise ExtractError(
                f"ExtractJob: dim {self.dim} breaks the downstream contract "
                f"({EMBED_DIM})")


@dataclass
class ExtractManifest:
    """What an extraction run produced and what it had to skip."""

    written: int
    skipped: list = field(default_factory=list)  # (item_id, reason)


class FakeEncoder:
    """Deterministic stand-in encoder keyed on the item id.

    Every id maps to a fixed pseudo-random vector, so re-running a job
    yields a byte-identical file. Items whose id starts with "broken"
    raise, exercising the skip path.
    """

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.batches = 0

    def encode_batch(self, items) -> np.ndarray:
        self.batches += 1
        out = np.empty((len(items), self.dim), dtype=np.float32)
        for i, item in enumerate(items):
            if str(item).startswith("broken"):
                raise OSError(f"cannot read {item}")
            digest = hashlib.sha256(str(item).encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            out[i] = np.random.default_rng(seed).standard_normal(
                self.dim).astype(np.float32)
        return out


def extract_embeddings(job: ExtractJob, encoder) -> ExtractManifest:
    """Run the encoder over the job's items and write the output file.

    Batches are retried item-by-item when they fail, so one unreadable
    item costs one manifest entry, not the batch.
    """
    if not job.items:
        raise ExtractError("extract_embeddings: empty item list")
    rows = []
    skipped = []
    for start in range(0, len(job.items), job.batch_size):
        batch = job.items[start:start + job.batch_size]
        try:
            vectors = encoder.encode_batch(batch)
            ok_pairs = zip(batch, vectors)
        except OSError:
            ok_pairs = []
            for item in batch:
                try:
                    vec = encoder.encode_batch([item])[0]
                except OSError as exc:
                    skipped.append((str(item), str(exc)))
                    continue
                ok_pairs.append((item, vec))
        for item, vec in ok_pairs:
            if vec.shape != (job.dim,):
                raise ExtractError(
                    f"encoder returned {vec.shape} for {item}, "
                    f"expected ({job.dim},)")
            rows.append((str(item), vec))
    Path(job.out_path).parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(job.out_path, job.dim, rows)
    return ExtractManifest(written=len(rows), skipped=skipped)
