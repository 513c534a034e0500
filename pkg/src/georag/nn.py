"""Minimal dense-network machinery with exact analytic backpropagation.

Layers are plain numpy arrays; forward caches everything backward needs.
Parameters train in float32; a float64 mode exists for gradient checking.
Checkpoints use the little-endian "G3NN" binary format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from georag.errors import FormatError, UsageError

CHECKPOINT_MAGIC = b"G3NN"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    """One affine layer: y = x @ weight.T + bias."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise UsageError("DenseLayer: weight must be 2-d, bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise UsageError("DenseLayer: weight/bias shape mismatch")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise UsageError("DenseLayer: non-finite parameters")


@dataclass
class MlpSpec:
    """Layer widths plus a per-layer activation ("relu" or "none")."""

    layer_dims: list
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise UsageError("MlpSpec: need at least input and output dims")
        if any(d <= 0 for d in self.layer_dims):
            raise UsageError("MlpSpec: dims must be positive")
        n_layers = len(self.layer_dims) - 1
        if not self.activations:
            # relu on hidden layers, linear output
            self.activations = ["relu"] * (n_layers - 1) + ["none"]
        if len(self.activations) != n_layers:
            raise UsageError("MlpSpec: one activation per layer required")
        if any(a not in ("relu", "none") for a in self.activations):
            raise UsageError(f"MlpSpec: unknown activation in {self.activations}")


def init_mlp(spec: MlpSpec, rng: np.random.Generator,
             dtype=np.float32) -> list[DenseLayer]:
    """Seeded uniform Kaiming-style fan-in initialization."""
    layers = []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        layers.append(DenseLayer(w, b))
    return layers


def mlp_forward(spec: MlpSpec, layers: Sequence[DenseLayer], x: np.ndarray):
    """Run the network on a batch, returning (output, cache).

    The cache holds per-layer inputs and pre-activations, enough for an
    exact backward pass.
    """
    if x.ndim != 2:
        raise UsageError("mlp_forward: input must be (batch, features)")
    if x.shape[1] != spec.layer_dims[0]:
        raise UsageError(
            f"mlp_forward: input width {x.shape[1]} != {spec.layer_dims[0]}")
    inputs = []
    preacts = []
    h = x
    for layer, act in zip(layers, spec.activations):
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0) if act == "relu" else z
    cache = {"spec": spec, "layers": layers, "inputs": inputs, "preacts": preacts}
    return h, cache


def mlp_backward(cache: dict, upstream_grad: np.ndarray):
    """Exact gradients from a forward cache.

    Returns ([(dW, db) per layer], input gradient).
    """
    spec = cache["spec"]
    layers = cache["layers"]
    inputs = cache["inputs"]
    preacts = cache["preacts"]
    if upstream_grad.shape != (inputs[0].shape[0], spec.layer_dims[-1]):
        raise UsageError("mlp_backward: upstream gradient shape mismatch")
    grads = [None] * len(layers)
    g = upstream_grad
    for i in range(len(layers) - 1, -1, -1):
        if spec.activations[i] == "relu":
            g = g * (preacts[i] > 0)
        dw = g.T @ inputs[i]
        db = g.sum(axis=0)
        grads[i] = (dw, db)
        g = g @ layers[i].weight
    return grads, g


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam over a flat list of parameter arrays."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure_buffers(self, params: Sequence[np.ndarray]):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def adamw_step(state: AdamWState, params: Sequence[np.ndarray],
               grads: Sequence[np.ndarray]) -> None:
    """One in-place AdamW update. Weight decay is applied before the
    Adam term: p -= lr*wd*p; p -= lr*mhat/(sqrt(vhat)+eps)."""
    if len(params) != len(grads):
        raise UsageError("adamw_step: params/grads length mismatch")
    state.ensure_buffers(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise UsageError("adamw_step: parameter/gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= (state.lr * state.weight_decay) * p
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class StepLrSchedule:
    """Multiplicative per-epoch decay: lr = base_lr * gamma**epoch."""

    base_lr: float
    gamma: float = 0.87

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise UsageError(f"StepLrSchedule: gamma {self.gamma} out of (0, 1]")


def lr_step(schedule: StepLrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise UsageError("lr_step: epoch must be >= 0")
    return schedule.base_lr * schedule.gamma ** epoch


def save_checkpoint(path, tensors: dict, header: dict | None = None) -> None:
    """Write named tensors in the "G3NN" format.

    Layout: magic, version u32, header length u32 + UTF-8 JSON header, then
    per tensor: name length u32, name, rank u32, dims u32 each, f32 data.
    """
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for name, arr in tensors.items():
            # ascontiguousarray would promote 0-d scalars to 1-d
            data = np.asarray(arr, dtype="<f4")
            if data.ndim:
                data = np.ascontiguousarray(data)
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a "G3NN" file, returning (tensors dict, header dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    tensors = {}
    while off < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
        tensors[name] = data
    return tensors, header
