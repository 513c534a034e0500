"""Contrastive tri-modal alignment: image/text/GPS heads trained with the
symmetric InfoNCE-style objective, plus database vector construction.

The image tower has two heads (one per target modality), the text tower
one head, and the GPS tower is the hierarchical encoder. Each modality
pair shares a single learnable temperature with its transposed direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from georag.errors import UsageError
from georag.geodesy import GeoPoint
from georag.gps_encoder import (GPS_EMBED_DIM, GpsEncoder, HierarchySpec,
                                RffMatrix, build_gps_encoder)
from georag.nn import (AdamWState, DenseLayer, MlpSpec, StepLrSchedule,
                       adamw_step, init_mlp, lr_step, mlp_backward,
                       mlp_forward, load_checkpoint, save_checkpoint)

IMAGE_DIM = 768
TEXT_DIM = 768

#: Upper bound on exp(t) so logits cannot blow up.
TEMPERATURE_CLAMP = 100.0


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 3e-5
    weight_decay: float = 1e-6
    epochs: int = 10
    gamma: float = 0.87
    t_init: float = 3.99
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.lr < 0:
            raise UsageError("TrainConfig: non-positive setting")
        if not np.isfinite(self.t_init):
            raise UsageError("TrainConfig: t_init must be finite")


@dataclass
class TriModalBatch:
    """Frozen pretrained embeddings plus ground-truth coordinates."""

    image_emb: np.ndarray  # (n, 768)
    text_emb: np.ndarray   # (n, 768)
    points: list[GeoPoint]

    def __post_init__(self):
        n = len(self.points)
        if self.image_emb.shape[0] != n or self.text_emb.shape[0] != n:
            raise UsageError("TriModalBatch: inconsistent row counts")
        if not (np.isfinite(self.image_emb).all() and np.isfinite(self.text_emb).all()):
            raise UsageError("TriModalBatch: non-finite embeddings")

    def __len__(self):
        return len(self.points)


@dataclass
class AlignmentModel:
    """All trainable state: three heads, GPS encoder, two temperatures."""

    img_text_head: list[DenseLayer]
    img_gps_head: list[DenseLayer]
    text_head: list[DenseLayer]
    gps_encoder: GpsEncoder
    t_image_text: np.ndarray  # 0-d
    t_image_gps: np.ndarray   # 0-d
    img_text_spec: MlpSpec = field(
        default_factory=lambda: MlpSpec([IMAGE_DIM, 768, 768]))
    img_gps_spec: MlpSpec = field(
        default_factory=lambda: MlpSpec([IMAGE_DIM, 768, GPS_EMBED_DIM]))
    text_spec: MlpSpec = field(
        default_factory=lambda: MlpSpec([TEXT_DIM, 768, 768]))
    seed: int = 0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for layers in (self.img_text_head, self.img_gps_head, self.text_head):
            for layer in layers:
                out.extend([layer.weight, layer.bias])
        out.extend(self.gps_encoder.params)
        out.extend([self.t_image_text, self.t_image_gps])
        return out


def init_alignment_model(seed: int = 0, t_init: float = 3.99,
                         hierarchy: HierarchySpec | None = None,
                         dtype=np.float32,
                         image_dim: int = IMAGE_DIM, text_dim: int = TEXT_DIM,
                         shared_dim: int = 768, gps_dim: int = GPS_EMBED_DIM,
                         head_hidden: int = 768, rff_dim: int = 512,
                         gps_hidden: int = 1024) -> AlignmentModel:
    """Seeded fresh model. The non-default dims exist for the 64-bit
    gradient-check mode; production uses the full-scale defaults."""
    hierarchy = hierarchy or HierarchySpec()
    rng = np.random.default_rng(seed)
    it_spec = MlpSpec([image_dim, head_hidden, shared_dim])
    ig_spec = MlpSpec([image_dim, head_hidden, gps_dim])
    tx_spec = MlpSpec([text_dim, head_hidden, shared_dim])
    model = AlignmentModel(
        img_text_head=init_mlp(it_spec, rng, dtype=dtype),
        img_gps_head=init_mlp(ig_spec, rng, dtype=dtype),
        text_head=init_mlp(tx_spec, rng, dtype=dtype),
        gps_encoder=build_gps_encoder(hierarchy, seed=seed, dtype=dtype,
                                      rff_dim=rff_dim, hidden_dim=gps_hidden,
                                      out_dim=gps_dim),
        t_image_text=np.array(t_init, dtype=dtype),
        t_image_gps=np.array(t_init, dtype=dtype),
        img_text_spec=it_spec,
        img_gps_spec=ig_spec,
        text_spec=tx_spec,
        seed=seed,
    )
    return model


def _normalize_rows(e: np.ndarray):
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UsageError("zero-norm embedding row")
    return e / norms, norms


def contrastive_pair_loss(ea: np.ndarray, eb: np.ndarray, t: float,
                          mean: bool = False):
    """Symmetric-normalized InfoNCE loss for direction a -> b.

    Rows are L2-normalized, logits are the scaled inner products, and the
    loss is the summed negative log-softmax of the diagonal (a mean-
    reduction flag exists but defaults off). Returns
    (loss, grad_ea, grad_eb, grad_t).
    """
    if ea.ndim != 2 or ea.shape != eb.shape:
        raise UsageError("contrastive_pair_loss: shape mismatch")
    n = ea.shape[0]
    if n < 1:
        raise UsageError("contrastive_pair_loss: empty batch")
    a, na = _normalize_rows(ea)
    b, nb = _normalize_rows(eb)
    t_val = float(t)
    scale = np.exp(t_val)
    clamped = scale > TEMPERATURE_CLAMP
    if clamped:
        scale = TEMPERATURE_CLAMP
    logits = (a @ b.T) * scale
    # stable log-softmax per row
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + mx
    loss = float((lse[:, 0] - np.diagonal(logits)).sum())
    probs = np.exp(logits - lse)
    g = probs - np.eye(n, dtype=logits.dtype)
    if mean:
        loss /= n
        g = g / n
    grad_t = 0.0 if clamped else float((g * logits).sum())
    da = (g @ b) * scale
    db = (g.T @ a) * scale
    # back through the row normalization
    grad_ea = (da - a * (a * da).sum(axis=1, keepdims=True)) / na
    grad_eb = (db - b * (b * db).sum(axis=1, keepdims=True)) / nb
    return loss, grad_ea, grad_eb, grad_t


def total_loss(batch: TriModalBatch, model: AlignmentModel,
               dtype=np.float32):
    """Four-term alignment objective and exact gradients for all params.

    L = (L_img,text + L_img,gps + L_text,img + L_gps,img) / 2. Returns
    (loss, gradient list aligned with model.params).
    """
    x_img = batch.image_emb.astype(dtype, copy=False)
    x_txt = batch.text_emb.astype(dtype, copy=False)

    a1, c1 = mlp_forward(model.img_text_spec, model.img_text_head, x_img)
    a2, c2 = mlp_forward(model.img_gps_spec, model.img_gps_head, x_img)
    tx, c3 = mlp_forward(model.text_spec, model.text_head, x_txt)
    gp, cg = model.gps_encoder.forward(batch.points, dtype=dtype)

    t1 = model.t_image_text
    t2 = model.t_image_gps
    l_it, d_a1_a, d_tx_a, dt1_a = contrastive_pair_loss(a1, tx, t1)
    l_ti, d_tx_b, d_a1_b, dt1_b = contrastive_pair_loss(tx, a1, t1)
    l_ig, d_a2_a, d_gp_a, dt2_a = contrastive_pair_loss(a2, gp, t2)
    l_gi, d_gp_b, d_a2_b, dt2_b = contrastive_pair_loss(gp, a2, t2)

    loss = (l_it + l_ig + l_ti + l_gi) / 2.0
    d_a1 = 0.5 * (d_a1_a + d_a1_b)
    d_a2 = 0.5 * (d_a2_a + d_a2_b)
    d_tx = 0.5 * (d_tx_a + d_tx_b)
    d_gp = 0.5 * (d_gp_a + d_gp_b)
    dt1 = 0.5 * (dt1_a + dt1_b)
    dt2 = 0.5 * (dt2_a + dt2_b)

    grads = []
    for cache, upstream in ((c1, d_a1), (c2, d_a2), (c3, d_tx)):
        layer_grads, _ = mlp_backward(cache, upstream.astype(dtype))
        for dw, db in layer_grads:
            grads.extend([dw, db])
    grads.extend(model.gps_encoder.backward(cg, d_gp.astype(dtype)))
    grads.append(np.array(dt1, dtype=dtype))
    grads.append(np.array(dt2, dtype=dtype))
    return loss, grads


def train(dataset: TriModalBatch, config: TrainConfig,
          dtype=np.float32):
    """Train a fresh model; deterministic given config.seed.

    Returns (model, per-epoch log of {"epoch", "lr", "mean_loss"}).
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("train: empty dataset")
    model = init_alignment_model(seed=config.seed, t_init=config.t_init,
                                 dtype=dtype)
    schedule = StepLrSchedule(base_lr=config.lr, gamma=config.gamma)
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(config.seed + 1)
    log = []
    for epoch in range(config.epochs):
        opt.lr = lr_step(schedule, epoch)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = TriModalBatch(dataset.image_emb[idx], dataset.text_emb[idx],
                                  [dataset.points[i] for i in idx])
            loss, grads = total_loss(batch, model, dtype=dtype)
            epoch_loss += loss
            adamw_step(opt, model.params, grads)
        log.append({"epoch": epoch, "lr": opt.lr, "mean_loss": epoch_loss / n})
    return model, log


def image_head_embeddings(image_emb: np.ndarray, model: AlignmentModel):
    """Both image-side head outputs for a batch (text space, gps space)."""
    x = np.atleast_2d(image_emb)
    et, _ = mlp_forward(model.img_text_spec, model.img_text_head, x)
    eg, _ = mlp_forward(model.img_gps_spec, model.img_gps_head, x)
    return et, eg


def vectorize_images(image_emb: np.ndarray, model: AlignmentModel) -> np.ndarray:
    """Concatenated database vectors for a batch of image embeddings.

    Raw, text-aligned, and gps-aligned segments are each L2-normalized,
    concatenated (768+768+512), then the whole vector is normalized for
    inner-product search.
    """
    x = np.atleast_2d(image_emb)
    et, eg = image_head_embeddings(x, model)
    seg1, _ = _normalize_rows(x)
    seg2, _ = _normalize_rows(et)
    seg3, _ = _normalize_rows(eg)
    full = np.concatenate([seg1, seg2, seg3], axis=1)
    out, _ = _normalize_rows(full)
    return out


def vectorize_image(image_emb: np.ndarray, model: AlignmentModel) -> np.ndarray:
    """Single-image variant of :func:`vectorize_images`."""
    if image_emb.ndim != 1 or image_emb.shape[0] != IMAGE_DIM:
        raise UsageError(f"vectorize_image: expected ({IMAGE_DIM},) embedding")
    return vectorize_images(image_emb[None, :], model)[0]


_NA = {None, "", "NA", "na", "N/A"}


def text_description(record) -> str:
    """Location sentence from a metadata record's city/county/country.

    Missing (NA) fields are skipped; with nothing left the sentence
    degrades to "A photo.".
    """
    parts = [getattr(record, f, None) for f in ("city", "county", "country")]
    parts = [p for p in parts if p not in _NA]
    if not parts:
        return "A photo."
    return f"A photo taken from {', '.join(parts)}."


def _head_tensors(name, layers):
    out = {}
    for i, layer in enumerate(layers):
        out[f"{name}/{i}/weight"] = layer.weight
        out[f"{name}/{i}/bias"] = layer.bias
    return out


def save_alignment_model(path, model: AlignmentModel) -> None:
    """Persist the model (including frozen RFF matrices) as a checkpoint."""
    tensors = {}
    tensors.update(_head_tensors("img_text_head", model.img_text_head))
    tensors.update(_head_tensors("img_gps_head", model.img_gps_head))
    tensors.update(_head_tensors("text_head", model.text_head))
    for k, (m, layers) in enumerate(zip(model.gps_encoder.rff,
                                        model.gps_encoder.mlps)):
        tensors[f"gps/rff/{k}"] = m.entries
        tensors.update(_head_tensors(f"gps/mlp/{k}", layers))
    tensors["t_image_text"] = model.t_image_text
    tensors["t_image_gps"] = model.t_image_gps
    h = model.gps_encoder.hierarchy
    header = {
        "hierarchy": {"n_hierarchies": h.n_hierarchies,
                      "sigma_min": h.sigma_min, "sigma_max": h.sigma_max},
        "rff_seeds": [m.seed for m in model.gps_encoder.rff],
        "seed": model.seed,
        "dims": {"image": IMAGE_DIM, "text": TEXT_DIM, "gps": GPS_EMBED_DIM},
    }
    save_checkpoint(path, tensors, header)


def _load_head(tensors, name, spec):
    layers = []
    for i in range(len(spec.layer_dims) - 1):
        layers.append(DenseLayer(tensors[f"{name}/{i}/weight"],
                                 tensors[f"{name}/{i}/bias"]))
    return layers


def load_alignment_model(path) -> AlignmentModel:
    tensors, header = load_checkpoint(path)
    h = HierarchySpec(**header["hierarchy"])
    sigmas = h.sigmas
    base = init_alignment_model(seed=header.get("seed", 0), hierarchy=h)
    enc = base.gps_encoder
    rff = [RffMatrix(tensors[f"gps/rff/{k}"], header["rff_seeds"][k], sigmas[k])
           for k in range(h.n_hierarchies)]
    mlps = [_load_head(tensors, f"gps/mlp/{k}", enc.spec)
            for k in range(h.n_hierarchies)]
    enc = GpsEncoder(h, rff, mlps, enc.spec)
    model = AlignmentModel(
        img_text_head=_load_head(tensors, "img_text_head", base.img_text_spec),
        img_gps_head=_load_head(tensors, "img_gps_head", base.img_gps_spec),
        text_head=_load_head(tensors, "text_head", base.text_spec),
        gps_encoder=enc,
        t_image_text=tensors["t_image_text"],
        t_image_gps=tensors["t_image_gps"],
        seed=header.get("seed", 0),
    )
    return model
