"""Transformer encoder with MLM and sequence-classification heads.

Post-norm blocks in the BERT-base style: additive-mask attention, residual,
layer norm, GELU feed-forward, residual, layer norm. The MLM projection is
weight-tied to the input embedding by default. Geometry is configurable from
tiny test models up to the 12x768x12 base preset.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"dialectlm-ckpt\n"
CHECKPOINT_VERSION = 1
ATTENTION_BIAS = -1e9
LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    intermediate_size: int
    vocab_size: int
    max_position: int = 512
    num_labels: int = 0
    dropout_rate: float = 0.1
    tie_mlm_weights: bool = True

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible "
                              f"by num_heads {self.num_heads}")
        if self.num_layers < 0 or self.vocab_size < 1 or self.max_position < 1:
            raise ConfigError("invalid model geometry")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} out of range")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


def base_config(vocab_size: int, num_labels: int = 0) -> ModelConfig:
    """The 12-layer, 768-hidden, 12-head preset."""
    return ModelConfig(num_layers=12, hidden_size=768, num_heads=12,
                       intermediate_size=3072, vocab_size=vocab_size,
                       max_position=512, num_labels=num_labels,
                       dropout_rate=0.1)


def count_params(config: ModelConfig) -> int:
    """Analytic parameter count for the given geometry."""
    h, i, v = config.hidden_size, config.intermediate_size, config.vocab_size
    embeddings = v * h + config.max_position * h + 2 * h
    per_layer = (3 * (h * h + h)      # query/key/value projections
                 + h * h + h          # attention output projection
                 + 2 * h              # attention layer norm
                 + h * i + i          # feed-forward inner
                 + i * h + h          # feed-forward outer
                 + 2 * h)             # feed-forward layer norm
    mlm_head = v if config.tie_mlm_weights else v * h + v
    classifier = (h * config.num_labels + config.num_labels
                  if config.num_labels else 0)
    return embeddings + config.num_layers * per_layer + mlm_head + classifier


def _truncated_normal(rng: np.random.Generator, shape, std: float,
                      dtype) -> np.ndarray:
    out = rng.standard_normal(shape, dtype=np.float64) * std
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()),
                                       dtype=np.float64) * std
        bad = np.abs(out) > bound
    return out.astype(dtype)


def init_params(config: ModelConfig, seed: int = 0,
                dtype=np.float32) -> dict[str, Tensor]:
    """Allocate and initialize all named parameter tensors."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC]))
    h, i, v = config.hidden_size, config.intermediate_size, config.vocab_size

    def normal(shape):
        return Tensor(_truncated_normal(rng, shape, INIT_STD, dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "embeddings.word": normal((v, h)),
        "embeddings.position": normal((config.max_position, h)),
        "embeddings.norm.gamma": ones(h),
        "embeddings.norm.beta": zeros(h),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}"
        for name in ("query", "key", "value", "output"):
            params[f"{p}.attention.{name}.weight"] = normal((h, h))
            params[f"{p}.attention.{name}.bias"] = zeros(h)
        params[f"{p}.attention.norm.gamma"] = ones(h)
        params[f"{p}.attention.norm.beta"] = zeros(h)
        params[f"{p}.ffn.inner.weight"] = normal((h, i))
        params[f"{p}.ffn.inner.bias"] = zeros(i)
        params[f"{p}.ffn.outer.weight"] = normal((i, h))
        params[f"{p}.ffn.outer.bias"] = zeros(h)
        params[f"{p}.ffn.norm.gamma"] = ones(h)
        params[f"{p}.ffn.norm.beta"] = zeros(h)
    if not config.tie_mlm_weights:
        params["mlm.decoder.weight"] = normal((v, h))
    params["mlm.bias"] = zeros(v)
    if config.num_labels:
        params["classifier.weight"] = normal((h, config.num_labels))
        params["classifier.bias"] = zeros(config.num_labels)
    return params


def init_classifier_head(params: dict[str, Tensor], config: ModelConfig,
                         seed: int) -> None:
    """(Re)initialize only the classification head, in place."""
    if config.num_labels < 2:
        raise ConfigError(f"classifier needs num_labels >= 2, got "
                          f"{config.num_labels}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1]))
    dtype = params["embeddings.word"].dtype
    params["classifier.weight"] = Tensor(
        _truncated_normal(rng, (config.hidden_size, config.num_labels),
                          INIT_STD, dtype), requires_grad=True)
    params["classifier.bias"] = Tensor(
        np.zeros(config.num_labels, dtype=dtype), requires_grad=True)


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return T.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def forward(input_ids: np.ndarray, attention_mask: np.ndarray,
            params: dict[str, Tensor], config: ModelConfig, *,
            train: bool = False,
            rng: Optional[np.random.Generator] = None
            ) -> tuple[Tensor, Tensor]:
    """Encode a batch; returns (hidden_states [B,L,H], mlm_logits [B,L,V])."""
    input_ids = np.asarray(input_ids)
    attention_mask = np.asarray(attention_mask)
    if input_ids.ndim != 2:
        raise T.ShapeError(f"input_ids must be [batch, len], got "
                           f"{input_ids.shape}")
    if attention_mask.shape != input_ids.shape:
        raise T.ShapeError(f"attention_mask shape {attention_mask.shape} "
                           f"does not match input_ids {input_ids.shape}")
    if input_ids.max() >= config.vocab_size or input_ids.min() < 0:
        raise T.ShapeError(f"token id out of range [0, {config.vocab_size})")
    batch, length = input_ids.shape
    if length > config.max_position:
        raise T.ShapeError(f"sequence length {length} exceeds max_position "
                           f"{config.max_position}")
    if train and rng is None:
        rng = np.random.default_rng(0)
    dtype = params["embeddings.word"].dtype
    rate = config.dropout_rate

    x = T.embedding(params["embeddings.word"], input_ids)
    pos = T.embedding(params["embeddings.position"], np.arange(length))
    x = x + pos
    x = T.layer_norm(x, params["embeddings.norm.gamma"],
                     params["embeddings.norm.beta"], LAYER_NORM_EPS)
    x = T.dropout(x, rate, rng, train)

    # additive bias: 0 on real tokens, -1e9 on PAD keys, shape [B,1,1,L]
    bias = Tensor(((1.0 - attention_mask[:, None, None, :])
                   * ATTENTION_BIAS).astype(dtype))
    heads, head_size = config.num_heads, config.head_size
    scale = Tensor(np.asarray(1.0 / math.sqrt(head_size), dtype=dtype))

    def split_heads(t: Tensor) -> Tensor:
        t = T.reshape(t, (batch, length, heads, head_size))
        return T.transpose(t, (0, 2, 1, 3))

    for layer in range(config.num_layers):
        p = f"layers.{layer}"
        q = split_heads(_linear(x, params, f"{p}.attention.query"))
        k = split_heads(_linear(x, params, f"{p}.attention.key"))
        v = split_heads(_linear(x, params, f"{p}.attention.value"))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale + bias
        probs = T.softmax(scores, axis=-1)
        probs = T.dropout(probs, rate, rng, train)
        context = T.matmul(probs, v)
        context = T.reshape(T.transpose(context, (0, 2, 1, 3)),
                            (batch, length, config.hidden_size))
        attn = _linear(context, params, f"{p}.attention.output")
        attn = T.dropout(attn, rate, rng, train)
        x = T.layer_norm(x + attn, params[f"{p}.attention.norm.gamma"],
                         params[f"{p}.attention.norm.beta"], LAYER_NORM_EPS)
        ff = _linear(T.gelu(_linear(x, params, f"{p}.ffn.inner")),
                     params, f"{p}.ffn.outer")
        ff = T.dropout(ff, rate, rng, train)
        x = T.layer_norm(x + ff, params[f"{p}.ffn.norm.gamma"],
                         params[f"{p}.ffn.norm.beta"], LAYER_NORM_EPS)

    decoder = (params["embeddings.word"] if config.tie_mlm_weights
               else params["mlm.decoder.weight"])
    logits = T.matmul(x, T.transpose(decoder, (1, 0))) + params["mlm.bias"]
    return x, logits


def classify(hidden_states: Tensor, params: dict[str, Tensor],
             config: ModelConfig) -> Tensor:
    """Class logits [B, num_labels] from the position-0 (CLS) hidden state."""
    if config.num_labels < 2:
        raise ConfigError(f"classify requires num_labels >= 2, got "
                          f"{config.num_labels}")
    cls = T.index_select(hidden_states, 1, 0)
    return T.matmul(cls, params["classifier.weight"]) + params["classifier.bias"]


def classify_probs(input_ids: np.ndarray, attention_mask: np.ndarray,
                   params: dict[str, Tensor],
                   config: ModelConfig) -> np.ndarray:
    """Inference-only class probabilities (no tape, no dropout)."""
    hidden, _ = forward(input_ids, attention_mask, params, config)
    logits = classify(hidden, params, config)
    return T.softmax(logits, axis=-1).data


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer_state: Optional[dict] = None
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_tensors(cls, config: ModelConfig, params: dict[str, Tensor],
                     step: int = 0,
                     optimizer_state: Optional[dict] = None) -> "Checkpoint":
        return cls(config=config,
                   params={k: np.array(t.data) for k, t in params.items()},
                   step=step, optimizer_state=optimizer_state)

    def to_tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(np.array(v), requires_grad=True)
                for k, v in self.params.items()}


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Versioned container: checksummed JSON manifest + raw f32 LE data."""
    entries = []
    offset = 0
    arrays = []
    opt = checkpoint.optimizer_state or {}
    opt_arrays = {}
    for key, value in sorted(opt.items()):
        if isinstance(value, np.ndarray):
            opt_arrays[key] = value
    for name, arr in checkpoint.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes
    opt_entries = []
    for key, arr in opt_arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        opt_entries.append({"name": key, "shape": list(arr.shape),
                            "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes
    opt_scalars = {k: v for k, v in opt.items()
                   if not isinstance(v, np.ndarray)}
    manifest = {
        "format_version": checkpoint.format_version,
        "config": asdict(checkpoint.config),
        "step": checkpoint.step,
        "tensors": entries,
        "optimizer_tensors": opt_entries,
        "optimizer_scalars": opt_scalars,
        "data_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(digest)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        blob = f.read(blob_len)
        digest = f.read(32)
        if hashlib.sha256(blob).digest() != digest:
            raise CheckpointError(f"{path}: manifest checksum mismatch")
        manifest = json.loads(blob)
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version "
                f"{manifest['format_version']}")
        data = f.read(manifest["data_bytes"])

    def read_entries(entries):
        out = {}
        for e in entries:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            start = e["offset"]
            arr = np.frombuffer(data, dtype="<f4", count=size,
                                offset=start).reshape(e["shape"])
            out[e["name"]] = np.array(arr)
        return out

    params = read_entries(manifest["tensors"])
    opt = read_entries(manifest["optimizer_tensors"])
    opt.update(manifest["optimizer_scalars"])
    config = ModelConfig(**manifest["config"])
    return Checkpoint(config=config, params=params, step=manifest["step"],
                      optimizer_state=opt or None,
                      format_version=manifest["format_version"])


def with_num_labels(checkpoint: Checkpoint, num_labels: int) -> ModelConfig:
    return replace(checkpoint.config, num_labels=num_labels)
