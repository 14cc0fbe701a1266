"""Transcription scoring: Levenshtein alignment, pooled corpus WER and
end-to-end model evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from encrl import autodiff as ad
from encrl.errors import ConfigError
from encrl.frontend import Utterance, Vocabulary, detokenize, load_dataset, make_batches
from encrl.losses import ctc_greedy_decode
from encrl.model import Model, count_params, forward_classifier, forward_encoder, load_checkpoint


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance with its (S, I, D) decomposition.

    The backtrace prefers the diagonal (match/substitution), then deletion,
    then insertion, so the decomposition is deterministic.
    """
    n, m = len(ref), len(hyp)
    dp = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev, row = dp[-1], [i]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1))
        dp.append(row)
    i, j = n, m
    s = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return dp[n][m], int(s), ins, dels


def split_units(text: str, unit: str) -> list[str]:
    if unit == "word":
        return text.split()
    if unit == "token":
        return [ch for ch in text if not ch.isspace()]
    raise ConfigError(f"unknown scoring unit {unit!r}")


@dataclass
class EvalReport:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    n_ref_words: int
    n_utterances: int
    worst: list[tuple[int, int, str, str]] = field(default_factory=list)
    n_params: int | None = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def summary_line(self) -> str:
        parts = [
            f"wer={self.wer:.6f}",
            f"sub={self.substitutions}",
            f"ins={self.insertions}",
            f"del={self.deletions}",
            f"words={self.n_ref_words}",
            f"utts={self.n_utterances}",
        ]
        if self.n_params is not None:
            parts.append(f"params={self.n_params}")
        parts += [f"{k}={v}" for k, v in sorted(self.meta.items())]
        return " ".join(parts)

    def to_text(self) -> str:
        lines = [
            f"wer={self.wer:.6f}",
            f"substitutions={self.substitutions}",
            f"insertions={self.insertions}",
            f"deletions={self.deletions}",
            f"ref_words={self.n_ref_words}",
            f"utterances={self.n_utterances}",
        ]
        if self.n_params is not None:
            lines.append(f"params={self.n_params}")
        lines += [f"meta.{k}={v}" for k, v in sorted(self.meta.items())]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        lines.append("worst:")
        lines += [f"  {idx}\terrors={err}\tref={ref}\thyp={hyp}" for idx, err, ref, hyp in self.worst]
        lines.append("summary: " + self.summary_line())
        return "\n".join(lines) + "\n"


def corpus_wer(pairs: Sequence[tuple[str, str]], unit: str = "word", worst_k: int = 5) -> EvalReport:
    """Pool S/I/D counts over all (reference, hypothesis) pairs."""
    if not pairs:
        raise ValueError("corpus_wer needs at least one (reference, hypothesis) pair")
    s = i = d = words = 0
    per_utt = []
    for idx, (ref, hyp) in enumerate(pairs):
        r, h = split_units(ref, unit), split_units(hyp, unit)
        dist, ds, di, dd = edit_distance(r, h)
        s, i, d, words = s + ds, i + di, d + dd, words + len(r)
        per_utt.append((idx, dist, ref, hyp))
    errors = s + i + d
    wer = errors / words if words else (0.0 if errors == 0 else float("inf"))
    worst = sorted(per_utt, key=lambda u: (-u[1], u[0]))[:worst_k]
    return EvalReport(wer, s, i, d, words, len(pairs), [w for w in worst if w[1] > 0], meta={"unit": unit})


def default_unit(vocab: Vocabulary) -> str:
    """Score whitespace-separated words when the vocabulary has a space, else single tokens."""
    return "word" if " " in vocab else "token"


def transcribe(model: Model, items: Sequence[Utterance], vocab: Vocabulary, batch_size: int = 32) -> list[str]:
    was_training = model.training
    model.eval()
    hyps = []
    try:
        with ad.no_grad():
            for batch in make_batches(items, batch_size):
                e, lengths = forward_encoder(model, batch.features, batch.feature_lengths)
                logits = forward_classifier(model, e)
                hyps += [detokenize(seq, vocab) for seq in ctc_greedy_decode(logits, lengths)]
    finally:
        model.training = was_training
    return hyps


def check_vocab(model: Model, vocab: Vocabulary) -> None:
    if model.config.vocab_size != len(vocab):
        raise ConfigError(f"model has {model.config.vocab_size} output classes but vocabulary has {len(vocab)}")
    stored = model.info.get("vocab")
    if stored is not None and list(stored) != list(vocab.symbols):
        raise ConfigError("vocabulary differs from the one stored in the checkpoint")


def evaluate(
    model,
    data,
    vocab: Vocabulary,
    unit: str | None = None,
    batch_size: int = 32,
    worst_k: int = 5,
) -> EvalReport:
    """Greedy-decode every utterance and score against its transcript.

    ``model`` may be a Model or a checkpoint path; ``data`` a manifest path or
    a list of loaded utterances.
    """
    if not isinstance(model, Model):
        model = load_checkpoint(model).to_model()
    check_vocab(model, vocab)
    items = data if isinstance(data, list) else load_dataset(data, vocab, model.config.n_mels)
    unit = unit or default_unit(vocab)
    hyps = transcribe(model, items, vocab, batch_size)
    report = corpus_wer([(u.text, h) for u, h in zip(items, hyps)], unit=unit, worst_k=worst_k)
    report.n_params = count_params(model)
    report.config = model.config.to_dict()
    return report
