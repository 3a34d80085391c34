"""Model pieces: embedding tables, dense layers, BCE, Adam, and the wired model.

The network is the fixed CTR-style tower: per-feature embedding lookup, an
optional dimension mask per table, concat, two ReLU layers, one logit.  All
backward passes are written out by hand; parameters, gradients and Adam
moments live on the layer objects.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import dml
from .data import FeatureSpec
from .errors import InputError
from .numerics import RngStream, sigmoid, softplus

# stream-key namespaces, one per purpose so draws never collide
KEY_GATE = 1 << 32
KEY_TABLE_INIT = 2 << 32
KEY_DENSE_INIT = 3 << 32

CHECKPOINT_MAGIC = b"DMLC"
CHECKPOINT_VERSION = 1


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class EmbeddingTable:
    vocab: int
    dim: int
    weights: np.ndarray
    adam_m: np.ndarray = field(repr=False, default=None)
    adam_v: np.ndarray = field(repr=False, default=None)
    grad: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.weights)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.weights)
        if self.grad is None:
            self.grad = np.zeros_like(self.weights)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "relu"  # "relu" | "linear"
    w_m: np.ndarray = field(repr=False, default=None)
    w_v: np.ndarray = field(repr=False, default=None)
    b_m: np.ndarray = field(repr=False, default=None)
    b_v: np.ndarray = field(repr=False, default=None)
    w_grad: np.ndarray = field(repr=False, default=None)
    b_grad: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name in ("w_m", "w_v", "w_grad"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.weights))
        for name in ("b_m", "b_v", "b_grad"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.bias))


@dataclass
class ModelSpec:
    features: List[FeatureSpec]
    hidden: Sequence[int] = (128, 64)


@dataclass
class Model:
    spec: ModelSpec
    tables: List[EmbeddingTable]
    masks: List[Optional[dml.MaskState]]
    layers: List[DenseLayer]
    gate_streams: List[Optional[RngStream]]


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic initialization from (seed): embeddings uniform in
    [-1/sqrt(d), 1/sqrt(d)], dense layers Glorot-uniform, biases zero."""
    tables, masks, streams = [], [], []
    for f, fs in enumerate(spec.features):
        init = RngStream(seed, KEY_TABLE_INIT | f)
        scale = 1.0 / np.sqrt(fs.base_dim) if fs.base_dim else 0.0
        w = (init.uniform((fs.buckets, fs.base_dim)) * 2.0 - 1.0) * scale
        tables.append(EmbeddingTable(fs.buckets, fs.base_dim, w))
        if fs.use_dml:
            masks.append(
                dml.MaskState(
                    original_dim=fs.base_dim,
                    scaled_dim=fs.initial_effective_dim / fs.base_dim,
                    slope=fs.slope,
                    alpha=fs.alpha,
                    reg_kind=fs.reg_kind,
                    reg_weight=fs.reg_weight,
                    layer_id=f,
                )
            )
            streams.append(RngStream(seed, KEY_GATE | f))
        else:
            masks.append(None)
            streams.append(None)
    layers = []
    fan_in = sum(fs.base_dim for fs in spec.features)
    widths = list(spec.hidden) + [1]
    for j, fan_out in enumerate(widths):
        init = RngStream(seed, KEY_DENSE_INIT | j)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = (init.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit
        act = "relu" if j < len(widths) - 1 else "linear"
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
        fan_in = fan_out
    return Model(spec, tables, masks, layers, streams)


def embed_forward(table: EmbeddingTable, ids: np.ndarray) -> np.ndarray:
    return table.weights[ids]


def embed_backward(table: EmbeddingTable, ids: np.ndarray, grad_out: np.ndarray):
    # duplicate ids in a batch accumulate, matching the dense-gradient sum
    np.add.at(table.grad, ids, grad_out)


def dense_forward(layer: DenseLayer, x: np.ndarray):
    pre = x @ layer.weights + layer.bias
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return out, (x, pre)


def dense_backward(layer: DenseLayer, cache, grad_out: np.ndarray) -> np.ndarray:
    x, pre = cache
    if layer.activation == "relu":
        grad_out = grad_out * (pre > 0.0)  # derivative 0 at exactly 0
    layer.w_grad += x.T @ grad_out
    layer.b_grad += grad_out.sum(axis=0)
    return grad_out @ layer.weights.T


def bce_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy from logits, plus d loss / d logits.

    loss_b = softplus(logit_b) - label_b * logit_b is the stable form; the
    gradient is (sigmoid(logit) - label) / batch.
    """
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    loss = float(np.mean(softplus(logits) - labels * logits))
    grad = (sigmoid(logits) - labels) / n
    return loss, grad


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              config: AdamConfig, step: int):
    """One Adam update in place; `step` starts at 1."""
    m *= config.beta1
    m += (1.0 - config.beta1) * grad
    v *= config.beta2
    v += (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** step)
    v_hat = v / (1.0 - config.beta2 ** step)
    param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


def zero_grads(model: Model):
    for t in model.tables:
        t.grad[:] = 0.0
    for l in model.layers:
        l.w_grad[:] = 0.0
        l.b_grad[:] = 0.0
    for s in model.masks:
        if s is not None:
            s.grad = 0.0


@dataclass
class ForwardResult:
    total_loss: float
    data_loss: float
    reg_loss: float
    logits: np.ndarray
    probs: np.ndarray
    effective_dims: List[float]  # one per DML feature, in feature order


def model_forward_backward(model: Model, ids: np.ndarray, labels: np.ndarray,
                           mode: str, streams: Optional[List[Optional[RngStream]]] = None,
                           want_grads: bool = True) -> ForwardResult:
    """Full forward pass and (optionally) hand-rolled reverse pass.

    Gradients are accumulated into the .grad buffers (call zero_grads first).
    `streams` overrides the model's own gate streams; finite-difference checks
    pass copies so the same noise can be replayed.
    """
    if streams is None:
        streams = model.gate_streams
    if want_grads and mode != "train":
        raise ValueError("gradients are only defined for train mode")
    blocks, caches, effective_dims = [], [], []
    for f, table in enumerate(model.tables):
        emb = embed_forward(table, ids[:, f])
        state = model.masks[f]
        if state is not None:
            out, cache = dml.forward(state, emb, mode, streams[f])
            effective_dims.append(cache.effective_dim)
        else:
            out, cache = emb, None
        blocks.append(out)
        caches.append(cache)
    x = np.hstack(blocks)
    dense_caches = []
    for layer in model.layers:
        x, cache = dense_forward(layer, x)
        dense_caches.append(cache)
    logits = x[:, 0]
    data_loss, grad_logits = bce_loss(logits, labels)
    reg_loss = 0.0
    for state in model.masks:
        if state is not None:
            loss, _ = dml.regularization(state)
            reg_loss += loss
    total = data_loss + reg_loss
    result = ForwardResult(total, data_loss, reg_loss, logits, sigmoid(logits), effective_dims)
    if not want_grads:
        return result

    g = grad_logits[:, None]
    for layer, cache in zip(reversed(model.layers), reversed(dense_caches)):
        g = dense_backward(layer, cache, g)
    offset = 0
    for f, table in enumerate(model.tables):
        width = table.dim
        g_block = g[:, offset:offset + width]
        offset += width
        state = model.masks[f]
        if state is not None:
            g_block, grad_scalar = dml.backward(state, caches[f], g_block)
            _, reg_grad = dml.regularization(state)
            state.grad += grad_scalar + reg_grad
        embed_backward(table, ids[:, f], g_block)
    return result


def model_adam_step(model: Model, config: AdamConfig, step: int):
    for t in model.tables:
        adam_step(t.weights, t.grad, t.adam_m, t.adam_v, config, step)
    for l in model.layers:
        adam_step(l.weights, l.w_grad, l.w_m, l.w_v, config, step)
        adam_step(l.bias, l.b_grad, l.b_m, l.b_v, config, step)
    for s in model.masks:
        if s is None:
            continue
        # the scalar goes through the same rule; scalars are 0-d arrays here
        p = np.array(s.scaled_dim)
        m = np.array(s.adam_m)
        v = np.array(s.adam_v)
        adam_step(p, np.array(s.grad), m, v, config, step)
        s.scaled_dim, s.adam_m, s.adam_v = float(p), float(m), float(v)


def model_eval_probs(model: Model, ids: np.ndarray, labels: np.ndarray) -> ForwardResult:
    return model_forward_backward(model, ids, labels, "eval", want_grads=False)


# --- checkpoint serialization ------------------------------------------------
# params.bin: magic "DMLC", uint32 LE version, then every parameter array as
# little-endian float64 in declaration order: embedding tables (feature order,
# row-major), dense layers (weights row-major then bias, layer order), then
# the mask scalars (feature order, DML features only).


def _param_arrays(model: Model) -> List[np.ndarray]:
    arrays = [t.weights for t in model.tables]
    for l in model.layers:
        arrays.extend([l.weights, l.bias])
    arrays.extend(
        np.array([s.scaled_dim]) for s in model.masks if s is not None
    )
    return arrays


def pack_params(model: Model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _param_arrays(model))
    return b"".join(parts)


def unpack_params(model: Model, blob: bytes):
    """Fill `model`'s parameters in place from a params.bin payload."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise InputError("params.bin: bad magic")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"params.bin: unsupported version {version}")
    flat = np.frombuffer(blob, dtype="<f8", offset=8)
    expected = sum(a.size for a in _param_arrays(model))
    if flat.size != expected:
        raise InputError(
            f"params.bin: expected {expected} float64 values, found {flat.size}"
        )
    pos = 0
    for a in _param_arrays(model):
        chunk = flat[pos:pos + a.size].reshape(a.shape).astype(np.float64)
        pos += a.size
        a[:] = chunk
    # scalar masks were copied via temporaries; write them back explicitly
    pos = sum(t.weights.size for t in model.tables)
    for l in model.layers:
        pos += l.weights.size + l.bias.size
    for s in model.masks:
        if s is not None:
            s.scaled_dim = float(flat[pos])
            pos += 1


def save_checkpoint(out_dir, model: Model, meta: dict):
    """Write spec.json (metadata, deterministic layout) and params.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    (out / "spec.json").write_text(text, encoding="utf-8")
    (out / "params.bin").write_bytes(pack_params(model))


def load_checkpoint(model_dir):
    """Rebuild the model named by spec.json and fill it from params.bin."""
    path = Path(model_dir)
    try:
        meta = json.loads((path / "spec.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"no spec.json under {model_dir}")
    except json.JSONDecodeError as e:
        raise InputError(f"spec.json is not valid JSON: {e}")
    features = [FeatureSpec(**f) for f in meta["features"]]
    spec = ModelSpec(features, tuple(meta["hidden"]))
    model = build_model(spec, int(meta["seed"]))
    try:
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError:
        raise InputError(f"no params.bin under {model_dir}")
    unpack_params(model, blob)
    return model, meta
