"""Reference training, encoder representation learning (EncRL) and CTC
finetuning, with AdamW, warmup + exponential decay and seeded RNG streams.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from encrl import autodiff as ad
from encrl.config import format_config
from encrl.errors import ConfigError
from encrl.evaluation import check_vocab, evaluate
from encrl.frontend import Utterance, Vocabulary, load_dataset, make_batches, spec_augment
from encrl.losses import ctc_loss, encrl_loss, parse_mode
from encrl.model import (
    Checkpoint,
    Model,
    ModelConfig,
    build_model,
    count_params,
    forward_classifier,
    forward_encoder,
    init_from_slice,
    load_checkpoint,
    reinit_params,
    save_checkpoint,
    slice_indices,
    time_mask,
)

log = logging.getLogger(__name__)

PHASES = ("reference", "encrl", "finetune")


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def phase_epochs(phase: str, z: int) -> int:
    """Reference trains for Z epochs, EncRL for 2Z/3, each finetune for Z/3 (round half up, at least 1)."""
    if phase == "reference":
        return max(1, z)
    if phase == "encrl":
        return max(1, round_half_up(2 * z / 3))
    if phase == "finetune":
        return max(1, round_half_up(z / 3))
    raise ConfigError(f"unknown phase {phase!r}")


def epoch_budget(z: int, n_models: int) -> dict[str, int]:
    """Epochs to produce ``n_models`` small models: via EncRL + finetuning vs. training each from scratch."""
    finetune_total = n_models * phase_epochs("finetune", z)
    return {
        "reference": z,
        "encrl": phase_epochs("encrl", z),
        "finetune_total": finetune_total,
        "scratch_total": n_models * z,
        "speedup": (n_models * z) / finetune_total,
    }


@dataclass
class TrainConfig:
    phase: str = "reference"
    z: int = 30
    epochs: int | None = None
    batch_size: int = 64
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    decay_rate: float = 0.99995
    weight_decay: float = 1e-6
    max_grad_norm: float = 0.0
    seed: int = 0
    # model
    layers: int = 4
    d_model: int = 32
    ff_dim: int = 64
    heads: int = 4
    conv_kernel: int = 7
    dropout: float = 0.0
    n_mels: int = 80
    # encrl
    loss: str = "clip+mse"
    clip_temperature: float = 0.07
    w_clip: float = 1.0
    w_mse: float = 1.0
    w_mae: float = 1.0
    # finetune
    slice: str = "first"
    reuse_head: bool = True
    # augmentation
    specaug: bool = True
    f_mask: int = 27
    t_mask: int = 80
    n_f_masks: int = 1
    n_t_masks: int = 1
    # paths
    train_manifest: str | None = None
    test_manifest: str | None = None
    vocab: str | None = None
    reference: str | None = None
    init: str | None = None
    out: str = "runs"

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.z < 1 or (self.epochs is not None and self.epochs < 1):
            raise ConfigError("epoch budgets must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigError("decay_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        parse_mode(self.loss)

    @property
    def n_epochs(self) -> int:
        return self.epochs if self.epochs is not None else phase_epochs(self.phase, self.z)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            n_layers=self.layers,
            d_model=self.d_model,
            ff_dim=self.ff_dim,
            n_heads=self.heads,
            conv_kernel_width=self.conv_kernel,
            vocab_size=vocab_size,
            dropout_p=self.dropout,
            n_mels=self.n_mels,
        )


# --- schedule and optimizer -------------------------------------------------


def lr_at(step: int, peak_lr: float, warmup_steps: int, decay_rate: float) -> float:
    """Linear ramp 0 -> peak over ``warmup_steps``, then ``peak * decay_rate ** (step - warmup)``."""
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * decay_rate ** (step - warmup_steps)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> OptimizerState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-6,
) -> OptimizerState:
    """In-place AdamW: decoupled decay ``p *= 1 - lr * wd``, then the bias-corrected Adam step."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= p.dtype.type(1.0 - lr * weight_decay)
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


def clip_grad_norm(params: Sequence[ad.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


# --- seeding and logs ---------------------------------------------------------


@dataclass
class Seeds:
    seed: int
    data: np.random.Generator
    init: np.random.Generator
    dropout: np.random.Generator
    specaug: np.random.Generator
    head: np.random.Generator


def set_global_seed(seed: int) -> Seeds:
    """Independent, reproducible streams for data order, init, dropout, SpecAugment
    and freshly drawn classifier heads."""
    return Seeds(seed, *(np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(5)))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunLog:
    """Append-only records, serialized one per line as space-separated key=value pairs."""

    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, **fields) -> None:
        self.records.append(fields)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(self.format_record(fields) + "\n")

    @staticmethod
    def format_record(rec: dict) -> str:
        return " ".join(f"{k}={_fmt(v)}" for k, v in rec.items())

    def lines(self) -> list[str]:
        return [self.format_record(r) for r in self.records]

    def steps(self) -> list[dict]:
        return [r for r in self.records if r.get("event") == "step"]

    def epochs(self) -> list[dict]:
        return [r for r in self.records if r.get("event") == "epoch"]


def read_runlog(path) -> list[dict[str, str]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(dict(kv.split("=", 1) for kv in line.split(" ")))
    return out


@dataclass
class TrainResult:
    model: Model
    log: RunLog
    final_path: Path | None
    best_path: Path | None
    best_metric: float
    history: list[dict] = field(default_factory=list)


# --- data helpers ------------------------------------------------------------


def resolve_vocab(config: TrainConfig) -> Vocabulary:
    if config.vocab:
        return Vocabulary.load(config.vocab)
    if config.train_manifest:
        candidate = Path(config.train_manifest).parent / "vocab.txt"
        if candidate.exists():
            return Vocabulary.load(candidate)
    raise ConfigError("no vocabulary: set vocab=<path> or keep vocab.txt next to the training manifest")


@dataclass
class Data:
    vocab: Vocabulary
    train: list[Utterance]
    test: list[Utterance] | None = None


def load_data(config: TrainConfig) -> Data:
    if not config.train_manifest:
        raise ConfigError("train_manifest is required")
    vocab = resolve_vocab(config)
    train = load_dataset(config.train_manifest, vocab, config.n_mels)
    test = load_dataset(config.test_manifest, vocab, config.n_mels) if config.test_manifest else None
    return Data(vocab, train, test)


def _augmenter(config: TrainConfig, rng: np.random.Generator):
    if not config.specaug:
        return None
    return lambda feats: spec_augment(feats, config.f_mask, config.t_mask, config.n_f_masks, config.n_t_masks, rng)


def params_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def _meta(config: TrainConfig, data: Data, phase: str, epoch: int, **extra) -> dict:
    return {
        "phase": phase,
        "epoch": epoch,
        "seed": config.seed,
        "vocab": list(data.vocab.symbols),
        "train_config": {f.name: getattr(config, f.name) for f in dataclasses.fields(config)},
        **extra,
    }


def _phase_dir(config: TrainConfig, phase: str) -> Path | None:
    if not config.out:
        return None
    d = Path(config.out) / phase
    d.mkdir(parents=True, exist_ok=True)
    return d


def _optimize(
    model: Model,
    loss_fn: Callable[[object], tuple[ad.Tensor, dict[str, float]]],
    config: TrainConfig,
    data: Data,
    seeds: Seeds,
    phase: str,
    runlog: RunLog,
    epoch_end: Callable[[int, float], float],
    out_dir: Path | None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Shared epoch/step loop: batches, backward, clipping, AdamW, logging, checkpoints.

    ``epoch_end(epoch, mean_train_loss)`` returns the selection metric (lower is better).
    """
    params = model.parameters()
    trainable = [p for p in params if p.requires_grad]
    state = OptimizerState.zeros_like([p.data for p in trainable])
    augment = _augmenter(config, seeds.specaug)
    model.train(seeds.dropout)
    best = math.inf
    best_path = out_dir / "best.ckpt" if out_dir else None
    final_path = out_dir / "final.ckpt" if out_dir else None
    history = []
    step = 0
    for epoch in range(config.n_epochs):
        batches = make_batches(data.train, config.batch_size, rng=seeds.data, augment=augment)
        total, count = 0.0, 0
        for batch in batches:
            lr = lr_at(step, config.peak_lr, config.warmup_steps, config.decay_rate)
            model.zero_grad()
            loss, parts = loss_fn(batch)
            ad.backward(loss)
            norm = clip_grad_norm(trainable, config.max_grad_norm)
            adamw_step(
                [p.data for p in trainable],
                [p.grad for p in trainable],
                state,
                lr,
                weight_decay=config.weight_decay,
            )
            value = loss.item()
            total += value * len(batch)
            count += len(batch)
            runlog.append(
                event="step",
                phase=phase,
                epoch=epoch,
                step=step,
                lr=lr,
                **{"loss.total": value},
                **{f"loss.{k}": v for k, v in parts.items()},
                grad_norm=norm,
            )
            step += 1
        model.eval()
        metric = epoch_end(epoch, total / count)
        model.train()
        history.append({"epoch": epoch, "train_loss": total / count, "metric": metric})
        if out_dir is not None:
            meta = _meta(config, data, phase, epoch, **(extra_meta or {}))
            if metric < best:
                save_checkpoint(model, {**meta, "selection_metric": metric}, best_path)
            save_checkpoint(model, meta, final_path)
        best = min(best, metric)
    model.eval()
    return TrainResult(model, runlog, final_path, best_path, best, history)


def _ctc_step(model: Model):
    def loss_fn(batch):
        e, lengths = forward_encoder(model, batch.features, batch.feature_lengths)
        logp = ad.log_softmax(forward_classifier(model, e), axis=-1)
        loss = ctc_loss(logp, lengths, batch.targets, batch.target_lengths, reduction="mean")
        return loss, {"ctc": loss.item()}

    return loss_fn


def _ctc_epoch_end(model: Model, data: Data, runlog: RunLog, phase: str):
    def epoch_end(epoch: int, train_loss: float) -> float:
        rec = {"event": "epoch", "phase": phase, "epoch": epoch, "train_loss": train_loss}
        metric = train_loss
        if data.test:
            wer = evaluate(model, data.test, data.vocab).wer
            rec["wer"] = wer
            metric = wer
        runlog.append(**rec)
        log.info("%s epoch %d: %s", phase, epoch, rec)
        return metric

    return epoch_end


def _start(config: TrainConfig, phase: str) -> tuple[Path | None, RunLog]:
    config.validate()
    out_dir = _phase_dir(config, phase)
    runlog = RunLog()
    if out_dir is not None:
        (out_dir / "config.txt").write_text(format_config(config), encoding="utf-8")
        runlog.path = out_dir / "runlog.txt"
        runlog.path.write_text("", encoding="utf-8")
    return out_dir, runlog


def train_ctc(config: TrainConfig, data: Data | None = None, model: Model | None = None, phase: str = "reference") -> TrainResult:
    """CTC training of ``model`` (or a fresh model built from ``config``)."""
    data = data or load_data(config)
    out_dir, runlog = _start(config, phase)
    seeds = set_global_seed(config.seed)
    if model is None:
        model = build_model(config.model_config(len(data.vocab)), seeds.init)
    check_vocab(model, data.vocab)
    model.info["vocab"] = list(data.vocab.symbols)
    extra = {k: model.info[k] for k in ("init", "head", "prune") if k in model.info}
    runlog.append(
        event="start", phase=phase, epochs=config.n_epochs, z=config.z, params=count_params(model),
        seed=config.seed, head=extra.get("head", "fresh"),
    )
    return _optimize(
        model, _ctc_step(model), config, data, seeds, phase, runlog,
        _ctc_epoch_end(model, data, runlog, phase), out_dir, extra_meta=extra,
    )


def train_reference(config: TrainConfig, data: Data | None = None) -> TrainResult:
    """Train an N-layer model with CTC for Z epochs (also used for from-scratch baselines)."""
    return train_ctc(dataclasses.replace(config, phase="reference"), data, phase="reference")


def _as_checkpoint(source) -> Checkpoint:
    if isinstance(source, Checkpoint):
        return source
    if isinstance(source, Model):
        return Checkpoint(source.config, source.state_dict(), dict(source.info))
    return load_checkpoint(source)


def train_encrl(config: TrainConfig, reference, data: Data | None = None) -> TrainResult:
    """Align an M-layer encoder with a frozen reference for 2Z/3 epochs.

    The reference runs in eval mode without gradients; its parameter digest is
    checked after every epoch and the run aborts if anything changed.
    """
    config = dataclasses.replace(config, phase="encrl")
    data = data or load_data(config)
    ref_ckpt = _as_checkpoint(reference)
    ref = ref_ckpt.to_model().eval()
    ref.requires_grad_(False)
    check_vocab(ref, data.vocab)
    n_ref = ref.config.n_layers
    if config.layers > n_ref / 2:
        warnings.warn(f"lightweight depth {config.layers} exceeds half the reference depth ({n_ref})", stacklevel=2)
    out_dir, runlog = _start(config, "encrl")
    seeds = set_global_seed(config.seed)
    lw_config = dataclasses.replace(ref.config, n_layers=config.layers, dropout_p=config.dropout)
    model = build_model(lw_config, seeds.init)
    model.info["vocab"] = list(data.vocab.symbols)
    digest = params_digest(ref)
    weights = {"clip": config.w_clip, "mse": config.w_mse, "mae": config.w_mae}
    runlog.append(
        event="start", phase="encrl", epochs=config.n_epochs, z=config.z, params=count_params(model),
        ref_layers=n_ref, loss_mode=config.loss, seed=config.seed, ref_digest=digest,
    )

    def loss_fn(batch):
        with ad.no_grad():
            e_ref, lengths = forward_encoder(ref, batch.features, batch.feature_lengths)
            b_ref = forward_classifier(ref, e_ref)
        e_lw, _ = forward_encoder(model, batch.features, batch.feature_lengths)
        b_lw = forward_classifier(model, e_lw)
        valid = time_mask(lengths, e_lw.shape[1])
        return encrl_loss(e_ref, e_lw, b_ref, b_lw, valid, config.loss, weights, config.clip_temperature)

    def epoch_end(epoch: int, train_loss: float) -> float:
        grads_clear = all(p.grad is None for p in ref.parameters())
        unchanged = params_digest(ref) == digest
        runlog.append(event="epoch", phase="encrl", epoch=epoch, train_loss=train_loss, ref_frozen=grads_clear and unchanged)
        if not (grads_clear and unchanged):
            raise RuntimeError("reference model received gradients or changed during EncRL")
        return train_loss

    return _optimize(
        model, loss_fn, config, data, seeds, "encrl", runlog, epoch_end, out_dir,
        extra_meta={"loss_mode": config.loss, "reference_layers": n_ref},
    )


def prepare_finetune_model(config: TrainConfig, init, vocab: Vocabulary) -> Model:
    """The model finetuning starts from, before any update.

    The target has ``config.layers`` blocks copied from the source according to
    ``config.slice`` ("first", "last" or explicit indices). The classifier is
    reused when the vocabulary matches and ``reuse_head`` is set, otherwise it
    is freshly initialized.
    """
    source = _as_checkpoint(init)
    seeds = set_global_seed(config.seed)
    n_layers = config.layers or source.config.n_layers
    target_cfg = dataclasses.replace(
        source.config, n_layers=n_layers, dropout_p=config.dropout, vocab_size=len(vocab)
    )
    model = build_model(target_cfg, seeds.init)
    indices = slice_indices(config.slice, source.config.n_layers, n_layers)
    init_from_slice(model, source, indices)
    head = "reused" if "classifier" in model.info["init"]["copied"] and config.reuse_head else "fresh"
    if head == "fresh":
        # a separate stream, so the head never coincides with the source model's initial head
        reinit_params(model, "classifier.", seeds.head)
    model.info["head"] = head
    return model


def finetune(config: TrainConfig, init, data: Data | None = None) -> TrainResult:
    """CTC finetuning for Z/3 epochs from an EncRL (or any) checkpoint; see ``prepare_finetune_model``."""
    config = dataclasses.replace(config, phase="finetune")
    data = data or load_data(config)
    model = prepare_finetune_model(config, init, data.vocab)
    return train_ctc(config, data, model, phase="finetune")
