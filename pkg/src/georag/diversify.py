"""Candidate generation: retrieval-augmented prompt ensemble over an
abstract multimodal-model client, plus coordinate parsing and pool
assembly.

K prompts with varying reference counts are each sampled N times; the
top-S retrieved coordinates are appended, so a fully parsed pool has
m = K*N + S candidates. Unparsable responses are dropped and logged, not
retried; transport failures get one retry before the query fails.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from georag.errors import (CoordinateParseError, CoordinateRangeError,
                           TransportError, UsageError)
from georag.geodesy import GeoPoint
from georag.index import VectorIndex

log = logging.getLogger(__name__)

#: Bump when the prompt template changes; a template change is a
#: format-breaking change for recorded runs.
PROMPT_TEMPLATE_VERSION = 1

PROMPT_INSTRUCTION = (
    "You are an expert in worldwide image geolocalization. "
    "Estimate the coordinates where the given photo was taken."
)
PROMPT_FORMAT_LINE = "Answer only: latitude, longitude"

#: Size of the seeded index sample used to pick dissimilar references.
NEGATIVE_SAMPLE_SIZE = 1024


@dataclass(frozen=True)
class PromptSpec:
    """Reference counts for one prompt; (0, 0) is the zero-shot prompt."""

    n_pos: int
    n_neg: int

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 0:
            raise UsageError("PromptSpec: counts must be >= 0")

    @property
    def is_zero_shot(self) -> bool:
        return self.n_pos == 0 and self.n_neg == 0


@dataclass
class PromptSet:
    specs: list = field(default_factory=lambda: [
        PromptSpec(0, 0), PromptSpec(5, 5), PromptSpec(10, 10), PromptSpec(15, 15)])
    n_generations: int = 5
    s_retrieved: int = 0

    def __post_init__(self):
        if len(self.specs) < 1 or self.n_generations < 1 or self.s_retrieved < 0:
            raise UsageError("PromptSet: invalid configuration")

    @property
    def max_references(self) -> int:
        return max([s.n_pos for s in self.specs] + [self.s_retrieved])


@dataclass
class LmmRequest:
    prompt: str
    image_ref: str | bytes | None = None
    temperature: float = 1.2
    seed: int | None = None  # honored by the mock client only

    def __post_init__(self):
        if self.temperature <= 0:
            raise UsageError("LmmRequest: temperature must be > 0")


@dataclass
class LmmResponse:
    text: str
    status: str = "ok"


@dataclass(frozen=True)
class Provenance:
    kind: str                 # "generated" or "retrieved"
    prompt_index: int = -1    # k for generated
    generation: int = -1      # j for generated
    rank: int = -1            # for retrieved

    def label(self) -> str:
        if self.kind == "generated":
            return f"generated({self.prompt_index},{self.generation})"
        return f"retrieved({self.rank})"


@dataclass
class Candidate:
    point: GeoPoint
    provenance: Provenance


@dataclass
class CandidatePool:
    candidates: list
    dropped: list = field(default_factory=list)  # (provenance, reason)

    def __len__(self):
        return len(self.candidates)

    def points(self) -> list[GeoPoint]:
        return [c.point for c in self.candidates]


@dataclass
class RetrievalHit:
    id: int
    score: float
    point: GeoPoint


def select_references(query_vec: np.ndarray, hits: list, spec: PromptSpec,
                      index: VectorIndex | None = None, seed: int = 0):
    """Positive and negative reference coordinates for one prompt.

    Positives are the top-n_pos retrieval hits. Negatives are the
    n_neg lowest-similarity records from a seeded fixed-size sample of
    the index, so dissimilar references are deterministic per seed.
    """
    if spec.n_pos > len(hits):
        raise UsageError(
            f"select_references: need {spec.n_pos} hits, have {len(hits)}")
    pos = [h.point for h in hits[:spec.n_pos]]
    neg: list[GeoPoint] = []
    if spec.n_neg > 0:
        if index is None:
            raise UsageError("select_references: negatives need the index")
        sample_ids = index.sample_ids(NEGATIVE_SAMPLE_SIZE, seed)
        if len(sample_ids) < spec.n_neg:
            raise UsageError("select_references: not enough records for negatives")
        records = [index.record(int(i)) for i in sample_ids]
        q = query_vec.astype(np.float64)
        scored = sorted(
            ((float(r.vector.astype(np.float64) @ q), r.id, r.point)
             for r in records),
            key=lambda t: (t[0], t[1]))
        neg = [p for _, _, p in scored[:spec.n_neg]]
    return pos, neg


def render_prompt(spec: PromptSpec, pos: list, neg: list) -> str:
    """Deterministic prompt text; reference lines use 4 decimal places."""
    if len(pos) != spec.n_pos or len(neg) != spec.n_neg:
        raise UsageError("render_prompt: reference counts do not match spec")
    lines = [PROMPT_INSTRUCTION]
    if pos:
        lines.append("Similar locations:")
        lines.extend(f"- {p.lat_deg:.4f}, {p.lon_deg:.4f}" for p in pos)
    if neg:
        lines.append("Dissimilar locations:")
        lines.extend(f"- {p.lat_deg:.4f}, {p.lon_deg:.4f}" for p in neg)
    lines.append(PROMPT_FORMAT_LINE)
    return "\n".join(lines)


_LABELED_RE = re.compile(
    r"latitude[:\s]+(-?\d+(?:\.\d+)?).*?longitude[:\s]+(-?\d+(?:\.\d+)?)",
    re.IGNORECASE | re.DOTALL)
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def parse_coordinates(text: str) -> GeoPoint:
    """Extract the first signed-decimal lat/lon pair from model output."""
    m = _LABELED_RE.search(text)
    if m:
        lat, lon = float(m.group(1)), float(m.group(2))
    else:
        nums = _NUMBER_RE.findall(text)
        if len(nums) < 2:
            raise CoordinateParseError(f"no coordinate pair in: {text!r}")
        lat, lon = float(nums[0]), float(nums[1])
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise CoordinateRangeError(f"coordinates out of range: ({lat}, {lon})")
    return GeoPoint(lat, lon)


def generate_candidates(client, image_ref, prompt_set: PromptSet, hits: list,
                        query_vec: np.ndarray | None = None,
                        index: VectorIndex | None = None,
                        seed: int = 0, temperature: float = 1.2) -> CandidatePool:
    """Assemble the candidate pool for one query image.

    Issues K*N requests in deterministic (k, j) order, drops unparsable
    responses with a logged reason, and appends the top-S retrieved
    coordinates.
    """
    candidates = []
    dropped = []
    for k, spec in enumerate(prompt_set.specs):
        if spec.is_zero_shot:
            pos, neg = [], []
        else:
            pos, neg = select_references(query_vec, hits, spec, index,
                                         seed=seed + k)
        prompt = render_prompt(spec, pos, neg)
        for j in range(prompt_set.n_generations):
            prov = Provenance("generated", prompt_index=k, generation=j)
            req = LmmRequest(prompt, image_ref, temperature=temperature,
                             seed=seed * 10007 + k * 101 + j)
            resp = _complete_with_retry(client, req)
            if resp.status != "ok":
                raise TransportError(
                    f"model call failed for prompt {k}, generation {j}: {resp.text}")
            try:
                point = parse_coordinates(resp.text)
            except (CoordinateParseError, CoordinateRangeError) as exc:
                log.warning("dropping %s: %s", prov.label(), exc)
                dropped.append((prov, str(exc)))
                continue
            candidates.append(Candidate(point, prov))
    for rank in range(prompt_set.s_retrieved):
        if rank >= len(hits):
            raise UsageError(
                f"generate_candidates: s_retrieved {prompt_set.s_retrieved} "
                f"exceeds {len(hits)} retrieval hits")
        candidates.append(Candidate(hits[rank].point,
                                    Provenance("retrieved", rank=rank)))
    return CandidatePool(candidates, dropped)


def _complete_with_retry(client, req: LmmRequest) -> LmmResponse:
    # drop-don't-retry applies to bad parses; transport errors get one retry
    try:
        return client.complete(req)
    except TransportError:
        return client.complete(req)


class MockLmmClient:
    """Deterministic stand-in for a hosted multimodal model.

    Prompts with similar-location references get the centroid of those
    references perturbed by seeded Gaussian noise; zero-shot prompts get a
    fixed landmark guess. Request seeds make every response reproducible.
    """

    def __init__(self, noise_sigma_deg: float = 0.5,
                 landmark: GeoPoint = GeoPoint(48.8584, 2.2945)):
        self.noise_sigma_deg = noise_sigma_deg
        self.landmark = landmark
        self.calls = 0

    def complete(self, req: LmmRequest) -> LmmResponse:
        self.calls += 1
        refs = _similar_locations(req.prompt)
        if not refs:
            return LmmResponse(_coord_text(self.landmark))
        lat = sum(p.lat_deg for p in refs) / len(refs)
        lon = sum(p.lon_deg for p in refs) / len(refs)
        rng = np.random.default_rng(req.seed or 0)
        lat += rng.normal(0.0, self.noise_sigma_deg)
        lon += rng.normal(0.0, self.noise_sigma_deg)
        lat = max(-90.0, min(90.0, lat))
        lon = max(-180.0, min(180.0, lon))
        return LmmResponse(_coord_text(GeoPoint(lat, lon)))


class EchoLmmClient:
    """Echoes the first similar-location reference verbatim.

    Zero-shot prompts carry no references, so they produce an unparsable
    refusal and are dropped by the pool assembly.
    """

    def __init__(self):
        self.calls = 0

    def complete(self, req: LmmRequest) -> LmmResponse:
        self.calls += 1
        refs = _similar_locations(req.prompt)
        if not refs:
            return LmmResponse("I cannot determine the location.")
        return LmmResponse(_coord_text(refs[0]))


def _coord_text(p: GeoPoint) -> str:
    return f"latitude: {p.lat_deg:.6f} and longitude: {p.lon_deg:.6f}"


def _similar_locations(prompt: str) -> list[GeoPoint]:
    """Parse the Similar locations section back out of a rendered prompt."""
    points = []
    in_section = False
    for line in prompt.splitlines():
        if line == "Similar locations:":
            in_section = True
        elif line.endswith(":") and not line.startswith("-"):
            in_section = False
        elif in_section and line.startswith("- "):
            lat_s, lon_s = line[2:].split(",")
            points.append(GeoPoint(float(lat_s), float(lon_s)))
    return points


class HttpLmmClient:
    """Chat-completion-style HTTP client for a hosted multimodal model.

    Auth comes from a bearer token in the configured environment variable;
    the image travels as a base64 data URL.
    """

    def __init__(self, base_url: str, model: str,
                 token_env: str = "GEORAG_LMM_TOKEN",
                 timeout_s: float = 60.0, retries: int = 1,
                 session=None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.timeout_s = timeout_s
        self.retries = retries
        if session is None:
            import requests
            session = requests.Session()
        self.session = session

    def _payload(self, req: LmmRequest) -> dict:
        content = [{"type": "text", "text": req.prompt}]
        if req.image_ref is not None:
            data = req.image_ref
            if isinstance(data, bytes):
                data = "data:image/jpeg;base64," + base64.b64encode(data).decode()
            content.append({"type": "image_url", "image_url": {"url": data}})
        return {
            "model": self.model,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": content}],
        }

    def complete(self, req: LmmRequest) -> LmmResponse:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error = None
        for _ in range(self.retries + 1):
            try:
                resp = self.session.post(
                    f"{self.base_url}/chat/completions",
                    data=json.dumps(self._payload(req)),
                    headers=headers, timeout=self.timeout_s)
                resp.raise_for_status()
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
                return LmmResponse(text)
            except Exception as exc:  # noqa: BLE001 - normalized below
                last_error = exc
        raise TransportError(f"model endpoint unreachable: {last_error}")
