"""Conformer-lite CTC model stored as a flat map of named parameters.

Layout: a strided depthwise-separable subsampler (``frontend.*``), a stack of
conformer blocks (``blocks.<i>.<submodule>.<param>``) and a linear projection
classifier (``classifier.*``). Forward passes are plain functions over the
parameter map, which keeps checkpointing, layer slicing and pruning simple.
"""

from __future__ import annotations

import copy
import dataclasses
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from encrl import autodiff as ad
from encrl.autodiff import Tensor
from encrl.errors import ConfigError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"SHCK"
CHECKPOINT_VERSION = 1
ATTN_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    ff_dim: int = 64
    n_heads: int = 4
    conv_kernel_width: int = 7
    subsample_factor: int = 4
    vocab_size: int = 9
    dropout_p: float = 0.0
    n_mels: int = 80

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model < 1 or self.ff_dim < 1 or self.n_heads < 1:
            raise ConfigError("d_model, ff_dim and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.conv_kernel_width % 2 == 0:
            raise ConfigError(f"conv_kernel_width must be odd, got {self.conv_kernel_width}")
        if self.subsample_factor != 4:
            raise ConfigError("the subsampler is two stride-2 layers; subsample_factor must be 4")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def large_reference_config(vocab_size: int = 257) -> ModelConfig:
    """12-layer reference with ff 256 at about 18.6 M parameters."""
    return ModelConfig(n_layers=12, d_model=400, ff_dim=256, n_heads=4, conv_kernel_width=31, vocab_size=vocab_size)


def lightweight_config(reference: ModelConfig, n_layers: int | None = None) -> ModelConfig:
    """Same widths as ``reference`` with at most half its depth."""
    m = reference.n_layers // 2 if n_layers is None else n_layers
    if m < 1 or m > reference.n_layers / 2:
        raise ConfigError(f"lightweight depth {m} must satisfy 1 <= M <= N/2 = {reference.n_layers / 2}")
    return dataclasses.replace(reference, n_layers=m)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, k, v, m = cfg.d_model, cfg.ff_dim, cfg.conv_kernel_width, cfg.vocab_size, cfg.n_mels
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv1.depthwise.weight": (m, 3),
        "frontend.conv1.pointwise.weight": (m, d),
        "frontend.conv1.pointwise.bias": (d,),
        "frontend.conv2.depthwise.weight": (d, 3),
        "frontend.conv2.pointwise.weight": (d, d),
        "frontend.conv2.pointwise.bias": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        for ff in ("ff1", "ff2"):
            shapes |= {
                f"{p}{ff}.norm.gamma": (d,),
                f"{p}{ff}.norm.beta": (d,),
                f"{p}{ff}.linear1.weight": (d, f),
                f"{p}{ff}.linear1.bias": (f,),
                f"{p}{ff}.linear2.weight": (f, d),
                f"{p}{ff}.linear2.bias": (d,),
            }
        shapes |= {
            f"{p}attn.norm.gamma": (d,),
            f"{p}attn.norm.beta": (d,),
            f"{p}attn.qkv.weight": (d, 3 * d),
            f"{p}attn.qkv.bias": (3 * d,),
            f"{p}attn.out.weight": (d, d),
            f"{p}attn.out.bias": (d,),
            f"{p}conv.norm.gamma": (d,),
            f"{p}conv.norm.beta": (d,),
            f"{p}conv.pointwise1.weight": (d, 2 * d),
            f"{p}conv.pointwise1.bias": (2 * d,),
            f"{p}conv.depthwise.weight": (d, k),
            f"{p}conv.depthwise.bias": (d,),
            f"{p}conv.norm2.gamma": (d,),
            f"{p}conv.norm2.beta": (d,),
            f"{p}conv.pointwise2.weight": (d, d),
            f"{p}conv.pointwise2.bias": (d,),
            f"{p}norm.gamma": (d,),
            f"{p}norm.beta": (d,),
        }
    shapes["classifier.weight"] = (d, v)
    shapes["classifier.bias"] = (v,)
    return shapes


def count_params(model_or_config) -> int:
    """Scalar parameters held by a model, or implied by a config."""
    if isinstance(model_or_config, Model):
        return sum(p.size for p in model_or_config.params.values())
    return sum(math.prod(s) for s in param_shapes(model_or_config).values())


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith((".beta", ".bias")):
        return np.zeros(shape, dtype=dtype)
    fan_in = shape[1] if "depthwise" in name else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    training: bool = False
    dropout_rng: np.random.Generator | None = None
    info: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def train(self, dropout_rng: np.random.Generator | None = None) -> Model:
        self.training = True
        if dropout_rng is not None:
            self.dropout_rng = dropout_rng
        return self

    def eval(self) -> Model:
        self.training = False
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> Model:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(copy.deepcopy(self.config), params, self.training, self.dropout_rng, copy.deepcopy(self.info))

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy ``state`` into this model, naming the first mismatching parameter on failure."""
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"parameter {name!r} missing from state")
            if state[name].shape != p.shape:
                raise ConfigError(f"parameter {name!r}: shape {state[name].shape} does not match model {p.shape}")
        extra = [k for k in state if k not in self.params]
        if extra:
            raise ConfigError(f"parameter {extra[0]!r} in state is not part of the model")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def __call__(self, features, lengths):
        e, out_lengths = forward_encoder(self, features, lengths)
        return forward_classifier(self, e), out_lengths


def build_model(config: ModelConfig, rng: np.random.Generator | int = 0, dtype=np.float32) -> Model:
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = {
        name: Tensor(_init_param(name, shape, rng, dtype), requires_grad=True)
        for name, shape in param_shapes(config).items()
    }
    return Model(config, params)


def reinit_params(model: Model, prefix: str, rng: np.random.Generator) -> list[str]:
    """Redraw every parameter whose name starts with ``prefix`` from its init distribution."""
    names = [n for n in model.params if n.startswith(prefix)]
    for n in names:
        p = model.params[n]
        p.data = _init_param(n, p.shape, rng, p.dtype)
    return names


# --- forward ---------------------------------------------------------------


def subsampled_lengths(lengths, factor: int = 4) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    return -(-lengths // factor)


def time_mask(lengths: np.ndarray, t_max: int) -> np.ndarray:
    """(B, T) boolean, true at valid frames."""
    return np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]


def sinusoidal_positions(t: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _norm(x: Tensor, params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"])


def _zero_padding(x: Tensor, valid: np.ndarray) -> Tensor:
    return ad.masked_fill(x, ~valid[:, :, None], 0.0)


def _dropout(model: Model, x: Tensor) -> Tensor:
    return ad.dropout(x, model.config.dropout_p, model.dropout_rng, model.training)


def feed_forward(model: Model, x: Tensor, prefix: str) -> Tensor:
    p = model.params
    h = ad.swish(_linear(_norm(x, p, f"{prefix}.norm"), p, f"{prefix}.linear1"))
    return _dropout(model, _linear(_dropout(model, h), p, f"{prefix}.linear2"))


def self_attention(model: Model, x: Tensor, valid: np.ndarray, prefix: str) -> Tensor:
    p = model.params
    b, t, d = x.shape
    heads = model.config.n_heads
    dh = d // heads
    qkv = _linear(_norm(x, p, f"{prefix}.norm"), p, f"{prefix}.qkv")
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, ~valid[:, None, None, :], ATTN_MASK_VALUE)
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    return _dropout(model, _linear(ctx, p, f"{prefix}.out"))


def conv_module(model: Model, x: Tensor, valid: np.ndarray, prefix: str) -> Tensor:
    p = model.params
    h = ad.glu(_linear(_norm(x, p, f"{prefix}.norm"), p, f"{prefix}.pointwise1"), axis=-1)
    h = ad.depthwise_conv1d(_zero_padding(h, valid), p[f"{prefix}.depthwise.weight"])
    h = h + p[f"{prefix}.depthwise.bias"]
    h = ad.swish(_norm(h, p, f"{prefix}.norm2"))
    return _dropout(model, _linear(h, p, f"{prefix}.pointwise2"))


def conformer_block(model: Model, x: Tensor, valid: np.ndarray, index: int) -> Tensor:
    prefix = f"blocks.{index}"
    x = x + 0.5 * feed_forward(model, x, f"{prefix}.ff1")
    x = x + self_attention(model, x, valid, f"{prefix}.attn")
    x = x + conv_module(model, x, valid, f"{prefix}.conv")
    x = x + 0.5 * feed_forward(model, x, f"{prefix}.ff2")
    return _norm(x, model.params, f"{prefix}.norm")


def subsample(model: Model, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    p = model.params
    for name in ("frontend.conv1", "frontend.conv2"):
        x = ad.depthwise_conv1d(x, p[f"{name}.depthwise.weight"], stride=2)
        lengths = subsampled_lengths(lengths, 2)
        x = _zero_padding(ad.swish(_linear(x, p, f"{name}.pointwise")), time_mask(lengths, x.shape[1]))
    return x, lengths


def forward_encoder(model: Model, features, lengths) -> tuple[Tensor, np.ndarray]:
    """Encoder features (B, ceil(T/4), d_model) and the subsampled valid lengths."""
    cfg = model.config
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=model.dtype))
    if x.ndim != 3 or x.shape[2] != cfg.n_mels:
        raise ShapeError(f"expected features (batch, time, {cfg.n_mels}), got {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],) or (lengths > x.shape[1]).any() or (lengths < 1).any():
        raise ShapeError(f"lengths {lengths.tolist()} do not fit padded time extent {x.shape[1]}")
    x = _zero_padding(x, time_mask(lengths, x.shape[1]))
    h, lengths = subsample(model, x, lengths)
    h = _dropout(model, h + sinusoidal_positions(h.shape[1], cfg.d_model, model.dtype))
    valid = time_mask(lengths, h.shape[1])
    for i in range(cfg.n_layers):
        h = conformer_block(model, h, valid, i)
    return h, lengths


def forward_classifier(model: Model, e: Tensor) -> Tensor:
    """Raw logits (B, T', vocab_size)."""
    return _linear(e, model.params, "classifier")


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_model(self) -> Model:
        model = build_model(self.config, 0, dtype=next(iter(self.params.values())).dtype)
        model.load_state(self.params)
        model.info = dict(self.meta)
        return model


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    blob = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        ad.write_tensor(buf, p.data)
    return buf.getvalue()


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Model, meta: dict | None, path) -> None:
    atomic_write(path, checkpoint_bytes(model, meta))


def parse_checkpoint(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    read = ad._read_exact
    if read(fh, 4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", read(fh, 4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (blob_len,) = struct.unpack("<Q", read(fh, 8))
    try:
        header = json.loads(read(fh, blob_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", read(fh, 4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", read(fh, 4))
        name = read(fh, n).decode("utf-8")
        params[name] = ad.read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(config, params, header.get("meta", {}), version)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def load_model(path) -> Model:
    return load_checkpoint(path).to_model()


# --- layer slicing and pruning ---------------------------------------------


def slice_indices(spec, n_source: int, n_target: int) -> list[int]:
    """Resolve ``"first"``, ``"last"`` or an explicit index list to source block indices."""
    if spec == "first":
        return list(range(n_target))
    if spec == "last":
        return list(range(n_source - n_target, n_source))
    if isinstance(spec, str):
        spec = [int(s) for s in spec.split(",") if s.strip()]
    return [int(i) for i in spec]


def init_from_slice(target: Model, source: Checkpoint, layer_indices: Sequence[int]) -> Model:
    """Copy source blocks ``layer_indices[i]`` into target block ``i``.

    The frontend and classifier are copied when their shapes agree; otherwise the
    target keeps its fresh initialization. What happened is recorded in
    ``target.info["init"]``.
    """
    layer_indices = list(layer_indices)
    n_src = source.config.n_layers
    if len(layer_indices) != target.config.n_layers:
        raise ConfigError(f"need {target.config.n_layers} layer indices, got {len(layer_indices)}")
    bad = [i for i in layer_indices if not 0 <= i < n_src]
    if bad:
        raise ConfigError(f"layer indices {bad} out of range for a {n_src}-layer source")
    for key in ("d_model", "ff_dim", "n_heads", "conv_kernel_width"):
        if getattr(source.config, key) != getattr(target.config, key):
            raise ConfigError(
                f"{key} differs: source {getattr(source.config, key)} vs target {getattr(target.config, key)}"
            )
    copied, fresh = [], []
    for i, src_i in enumerate(layer_indices):
        for name, p in target.params.items():
            prefix = f"blocks.{i}."
            if name.startswith(prefix):
                p.data = source.params[f"blocks.{src_i}." + name[len(prefix) :]].astype(p.dtype, copy=True)
    for group in ("frontend", "classifier"):
        names = [n for n in target.params if n.startswith(group + ".")]
        if all(n in source.params and source.params[n].shape == target.params[n].shape for n in names):
            for n in names:
                target.params[n].data = source.params[n].astype(target.params[n].dtype, copy=True)
            copied.append(group)
        else:
            fresh.append(group)
    target.info["init"] = {"layer_indices": layer_indices, "copied": copied, "fresh": fresh}
    return target


def prunable(name: str, exclude_conv: bool = False) -> bool:
    """Weights are prunable; biases and layer-norm parameters are not."""
    if not name.endswith(".weight"):
        return False
    parts = name.split(".")
    if exclude_conv and parts[0] == "blocks" and parts[2] == "conv":
        return False
    return True


@dataclass
class PruneReport:
    fraction: float
    exclude_conv: bool
    n_eligible: int
    n_pruned: int
    threshold: float
    zeroed: dict[str, int]


def magnitude_prune(model: Model, fraction: float, exclude_conv: bool = False) -> tuple[Model, PruneReport]:
    """Zero the floor(fraction * n_eligible) smallest-magnitude eligible weights, globally.

    Ties break by parameter order, then flat index. Returns a pruned copy.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"prune fraction must lie in [0, 1), got {fraction}")
    pruned = model.copy()
    names = [n for n in pruned.params if prunable(n, exclude_conv)]
    flat = np.concatenate([np.abs(pruned.params[n].data).reshape(-1) for n in names])
    k = int(math.floor(fraction * flat.size))
    zeroed = {n: 0 for n in pruned.params}
    threshold = 0.0
    if k:
        order = np.argsort(flat, kind="stable")[:k]
        threshold = float(flat[order[-1]])
        drop = np.zeros(flat.size, dtype=bool)
        drop[order] = True
        offset = 0
        for n in names:
            p = pruned.params[n]
            mask = drop[offset : offset + p.size].reshape(p.shape)
            offset += p.size
            p.data = np.where(mask, np.zeros((), p.dtype), p.data)
            zeroed[n] = int(mask.sum())
    report = PruneReport(fraction, exclude_conv, int(flat.size), k, threshold, zeroed)
    pruned.info["prune"] = {"fraction": fraction, "exclude_conv": exclude_conv, "n_pruned": k}
    return pruned, report
