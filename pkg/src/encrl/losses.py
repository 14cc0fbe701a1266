"""Training objectives: CTC, greedy CTC decoding, symmetric cross-entropy
feature alignment, masked MSE/MAE, the combined representation-learning loss
and a temperature-scaled softmax.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from encrl import autodiff as ad
from encrl.autodiff import Tensor
from encrl.errors import ConfigError, DataError, ShapeError

# Log-space stand-in for log(0); finite so the forward check and gradients stay clean.
LOG_ZERO = -1e30

ENCRL_MODES = ("clip", "mae", "mse", "clip+mae", "clip+mse")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# --- CTC ---------------------------------------------------------------------


def ctc_min_input_length(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def extend_with_blanks(targets: np.ndarray, blank: int = 0) -> np.ndarray:
    """(B, L) -> (B, 2L+1) with blanks interleaved."""
    b, lmax = targets.shape
    ext = np.full((b, 2 * lmax + 1), blank, dtype=np.int64)
    ext[:, 1::2] = targets
    return ext


def ctc_loss(
    log_probs: Tensor,
    input_lengths,
    targets,
    target_lengths,
    reduction: str = "none",
) -> Tensor:
    """Negative log-likelihood of each target under CTC, blank = 0.

    ``log_probs`` is (B, T, V), already log-softmaxed over V. The forward
    recursion runs in log space on the tape, so the gradient comes from
    differentiating the recursion itself. Returns per-item losses (B,), or
    their mean/sum.
    """
    lp = _as_tensor(log_probs)
    if lp.ndim != 3:
        raise ShapeError(f"log_probs must be (batch, time, vocab), got {lp.shape}")
    bsz, t_max, vocab = lp.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64).reshape(-1)
    target_lengths = np.asarray(target_lengths, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64)
    targets = np.zeros((bsz, 0), np.int64) if targets.size == 0 else targets.reshape(bsz, -1)
    if input_lengths.shape != (bsz,) or target_lengths.shape != (bsz,):
        raise ShapeError("input_lengths and target_lengths need one entry per batch item")
    if (input_lengths < 1).any() or (input_lengths > t_max).any():
        raise ShapeError(f"input lengths {input_lengths.tolist()} outside [1, {t_max}]")
    for i in range(bsz):
        tgt = targets[i, : target_lengths[i]]
        if (tgt <= 0).any() or (tgt >= vocab).any():
            raise DataError(f"item {i}: target ids must lie in [1, {vocab - 1}]")
        need = ctc_min_input_length(tgt)
        if need > input_lengths[i]:
            raise DataError(f"item {i}: target needs {need} frames but only {input_lengths[i]} available (infinite loss)")

    lmax = max(int(target_lengths.max()), 0)
    targets = targets[:, :lmax] if lmax else np.zeros((bsz, 0), dtype=np.int64)
    ext = extend_with_blanks(targets)
    n_states = ext.shape[1]
    dtype = lp.dtype
    s_idx = np.arange(n_states)[None, :]
    valid = s_idx < (2 * target_lengths[:, None] + 1)
    skip = np.zeros((bsz, n_states), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != 0) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid

    onehot = np.zeros((bsz, vocab, n_states), dtype=dtype)
    onehot[np.arange(bsz)[:, None], ext, s_idx] = 1.0
    emit = lp @ Tensor(onehot)  # (B, T, S): log p of each lattice state's label

    neg1 = Tensor(np.full((bsz, 1), LOG_ZERO, dtype=dtype))
    neg2 = Tensor(np.full((bsz, 2), LOG_ZERO, dtype=dtype))
    alpha = ad.where((s_idx < 2) & valid, emit[:, 0, :], LOG_ZERO)
    for t in range(1, t_max):
        moves = [alpha, ad.concat([neg1, alpha[:, :-1]], axis=1)]
        if n_states >= 3:
            moves.append(ad.where(skip, ad.concat([neg2, alpha[:, :-2]], axis=1), LOG_ZERO))
        new = ad.logsumexp(ad.stack(moves, axis=0), axis=0) + emit[:, t, :]
        active = (t < input_lengths)[:, None]
        alpha = ad.where(active, new, alpha)

    last = 2 * target_lengths
    ends = np.stack([last, np.maximum(last - 1, 0)], axis=1)
    final = ad.take_along_axis(alpha, ends, axis=1)
    final = ad.where(np.stack([np.ones(bsz, bool), target_lengths > 0], axis=1), final, LOG_ZERO)
    losses = -ad.logsumexp(final, axis=1)
    if reduction == "none":
        return losses
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    raise ConfigError(f"unknown reduction {reduction!r}")


def ctc_greedy_decode(log_probs, input_lengths) -> list[list[int]]:
    """Per-frame argmax, collapse adjacent repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out = []
    for row, n in zip(best, np.asarray(input_lengths)):
        seq, prev = [], -1
        for tok in row[:n]:
            if tok != prev and tok != 0:
                seq.append(int(tok))
            prev = tok
        out.append(seq)
    return out


# --- representation alignment ----------------------------------------------


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / ad.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def clip_loss(e_ref, e_lw, temperature: float = 0.07) -> Tensor:
    """Symmetric cross-entropy over the cosine-similarity matrix of two (B, d) batches.

    Row i of ``e_ref`` and row i of ``e_lw`` form the positive pair; all other
    rows are negatives, in both directions.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    e_ref, e_lw = _as_tensor(e_ref), _as_tensor(e_lw)
    if e_ref.ndim != 2 or e_ref.shape != e_lw.shape:
        raise ShapeError(f"clip_loss needs two equal (B, d) inputs, got {e_ref.shape} and {e_lw.shape}")
    n = e_ref.shape[0]
    sim = (l2_normalize(e_ref) @ ad.swapaxes(l2_normalize(e_lw), 0, 1)) * (1.0 / temperature)
    diag = (np.arange(n), np.arange(n))
    rows = -ad.log_softmax(sim, axis=1)[diag].mean()
    cols = -ad.log_softmax(sim, axis=0)[diag].mean()
    return 0.5 * (rows + cols)


def _masked_mean(values: Tensor, valid_mask) -> Tensor:
    if valid_mask is None:
        return values.mean()
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != values.shape[: mask.ndim]:
        raise ShapeError(f"mask {mask.shape} does not match leading dims of {values.shape}")
    per_position = int(np.prod(values.shape[mask.ndim :]))
    count = int(mask.sum()) * per_position
    if count == 0:
        raise DataError("mask selects no positions")
    w = mask.reshape(mask.shape + (1,) * (values.ndim - mask.ndim)).astype(values.dtype)
    return (values * w).sum() * (1.0 / count)


def mse_loss(b_ref, b_lw, valid_mask=None) -> Tensor:
    """Mean squared difference over valid positions."""
    b_ref, b_lw = _as_tensor(b_ref), _as_tensor(b_lw)
    if b_ref.shape != b_lw.shape:
        raise ShapeError(f"mse_loss shape mismatch: {b_ref.shape} vs {b_lw.shape}")
    diff = b_lw - b_ref
    return _masked_mean(diff * diff, valid_mask)


def mae_loss(b_ref, b_lw, valid_mask=None) -> Tensor:
    """Mean absolute difference over valid positions."""
    b_ref, b_lw = _as_tensor(b_ref), _as_tensor(b_lw)
    if b_ref.shape != b_lw.shape:
        raise ShapeError(f"mae_loss shape mismatch: {b_ref.shape} vs {b_lw.shape}")
    return _masked_mean(ad.tabs(b_lw - b_ref), valid_mask)


def masked_mean_pool(e: Tensor, valid_mask) -> Tensor:
    """(B, T, d) -> (B, d), averaging only valid frames."""
    mask = np.asarray(valid_mask, dtype=e.dtype)
    lengths = mask.sum(axis=1, keepdims=True)
    return (e * mask[:, :, None]).sum(axis=1) / lengths


def parse_mode(mode: str) -> tuple[str, ...]:
    key = mode.lower().replace(" ", "")
    if key not in ENCRL_MODES:
        raise ConfigError(f"unknown EncRL loss mode {mode!r}; expected one of {ENCRL_MODES}")
    return tuple(key.split("+"))


def encrl_loss(
    e_ref,
    e_lw,
    b_ref,
    b_lw,
    valid_mask,
    mode: str = "clip+mse",
    weights: dict[str, float] | None = None,
    temperature: float = 0.07,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of the selected alignment terms and a per-term breakdown.

    Encoder features ``e`` are mean-pooled over valid frames for the CLIP term;
    classifier outputs ``b`` are compared frame by frame.
    """
    parts = parse_mode(mode)
    weights = {"clip": 1.0, "mse": 1.0, "mae": 1.0, **(weights or {})}
    terms: dict[str, Tensor] = {}
    if "clip" in parts:
        pooled_ref = masked_mean_pool(_as_tensor(e_ref), valid_mask)
        pooled_lw = masked_mean_pool(_as_tensor(e_lw), valid_mask)
        terms["clip"] = clip_loss(pooled_ref, pooled_lw, temperature) * weights["clip"]
    if "mse" in parts:
        terms["mse"] = mse_loss(b_ref, b_lw, valid_mask) * weights["mse"]
    if "mae" in parts:
        terms["mae"] = mae_loss(b_ref, b_lw, valid_mask) * weights["mae"]
    total = None
    for term in terms.values():
        total = term if total is None else total + term
    breakdown = {k: v.item() for k, v in terms.items()}
    return total, breakdown


def tempered_softmax(z, temperature: float) -> Tensor:
    """softmax(z / T) over the last axis."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return ad.softmax(_as_tensor(z) * (1.0 / temperature), axis=-1)
