"""Audio and feature ingestion: WAV decoding, log-mel features, SpecAugment,
character vocabularies, manifests, padded batching and a synthetic corpus.
"""

from __future__ import annotations

import string
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from encrl.autodiff import load_tensor, save_tensor
from encrl.errors import DataError, FormatError

BLANK = "_"
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if self.samples.size == 0:
            raise DataError("audio clip is empty")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (n_frames, n_mels)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    transcript: str


@dataclass
class Vocabulary:
    """Ordered symbols; index 0 is the CTC blank."""

    symbols: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != BLANK:
            raise DataError(f"vocabulary must start with the blank symbol {BLANK!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("vocabulary symbols must be unique")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> Vocabulary:
        return cls([BLANK, *chars])

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def index(self, sym: str) -> int:
        return self._index[sym]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in self.symbols:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        with open(path, encoding="utf-8", newline="\n") as fh:
            return cls([line.rstrip("\n") for line in fh])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    unknown = sorted({ch for ch in text if ch not in vocab or ch == BLANK})
    if unknown:
        raise DataError(f"out-of-vocabulary characters: {unknown!r}")
    return [vocab.index(ch) for ch in text]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return "".join(vocab.symbols[i] for i in ids if i != 0)


# --- audio ----------------------------------------------------------------


def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            n = wf.getnframes()
            raw = wf.readframes(n)
            rate = wf.getframerate()
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioClip(samples, rate)


def save_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular HTK-scale filters from 0 Hz to Nyquist.

    Returns (weights of shape (n_mels, n_fft // 2 + 1), filter edge/centre
    frequencies of shape (n_mels + 2,)).
    """
    nyquist = sample_rate / 2
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    bins = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling)), edges


def mel_spectrogram(clip: AudioClip, n_mels: int = 80, win_ms: float = 20, hop_ms: float = 10) -> FeatureSequence:
    win = int(round(clip.sample_rate * win_ms / 1000))
    hop = int(round(clip.sample_rate * hop_ms / 1000))
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < win:
        raise DataError(f"clip has {x.size} samples, shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    power = np.abs(np.fft.rfft(frames * window, n=win, axis=1)) ** 2
    fb, _ = mel_filterbank(n_mels, win, clip.sample_rate)
    mel = power @ fb.T
    return FeatureSequence(np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


def spec_augment(
    features: FeatureSequence,
    f_mask: int = 27,
    t_mask: int = 80,
    n_f: int = 1,
    n_t: int = 1,
    rng: np.random.Generator | None = None,
) -> FeatureSequence:
    """Zero ``n_f`` frequency bands and ``n_t`` time bands of random width."""
    rng = rng if rng is not None else np.random.default_rng()
    out = features.frames.copy()
    n_time, n_freq = out.shape
    for _ in range(n_f):
        width = min(int(rng.integers(0, f_mask + 1)), n_freq)
        start = int(rng.integers(0, n_freq - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(n_t):
        width = min(int(rng.integers(0, t_mask + 1)), n_time)
        start = int(rng.integers(0, n_time - width + 1))
        out[start : start + width, :] = 0.0
    return FeatureSequence(out)


# --- manifests and datasets -------------------------------------------------


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            if "\t" in e.path or "\n" in e.transcript or "\t" in e.transcript:
                raise DataError(f"manifest fields may not contain tabs or newlines: {e!r}")
            fh.write(f"{e.path}\t{e.transcript}\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``<path>\\t<transcript>`` lines; relative paths resolve against the manifest's directory."""
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            src, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected '<path>\\t<transcript>'")
            p = Path(src)
            entries.append(ManifestEntry(str(p if p.is_absolute() else base / p), text))
    return entries


def load_features(path, n_mels: int = 80) -> FeatureSequence:
    if str(path).lower().endswith(".wav"):
        return mel_spectrogram(load_wav(path), n_mels=n_mels)
    arr = load_tensor(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: feature tensor must be 2-d, got shape {arr.shape}")
    return FeatureSequence(arr.astype(np.float32, copy=False))


@dataclass
class Utterance:
    features: FeatureSequence
    tokens: list[int]
    text: str


def load_dataset(manifest_path, vocab: Vocabulary, n_mels: int = 80) -> list[Utterance]:
    items = []
    for e in read_manifest(manifest_path):
        feats = load_features(e.path, n_mels)
        if feats.n_mels != n_mels:
            raise DataError(f"{e.path}: expected {n_mels} mel channels, got {feats.n_mels}")
        items.append(Utterance(feats, tokenize(e.transcript, vocab), e.transcript))
    return items


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, n_mels), zero padded
    feature_lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B, L_max), padded with 0
    target_lengths: np.ndarray  # (B,)
    texts: list[str]

    def __len__(self) -> int:
        return self.features.shape[0]


def collate(items: Sequence[Utterance], augment: Callable[[FeatureSequence], FeatureSequence] | None = None) -> Batch:
    feats = [augment(u.features) if augment else u.features for u in items]
    t_max = max(f.n_frames for f in feats)
    l_max = max((len(u.tokens) for u in items), default=0)
    x = np.zeros((len(items), t_max, feats[0].n_mels), dtype=np.float32)
    y = np.zeros((len(items), max(l_max, 1)), dtype=np.int64)
    for i, (f, u) in enumerate(zip(feats, items)):
        x[i, : f.n_frames] = f.frames
        y[i, : len(u.tokens)] = u.tokens
    return Batch(
        features=x,
        feature_lengths=np.array([f.n_frames for f in feats], dtype=np.int64),
        targets=y,
        target_lengths=np.array([len(u.tokens) for u in items], dtype=np.int64),
        texts=[u.text for u in items],
    )


def make_batches(
    items: Sequence[Utterance],
    batch_size: int,
    sort_by_length: bool = False,
    rng: np.random.Generator | None = None,
    augment: Callable[[FeatureSequence], FeatureSequence] | None = None,
) -> list[Batch]:
    """Group utterances into padded batches; the final partial batch is kept.

    With ``rng`` the item order (or, when sorting by length, the batch order)
    is shuffled deterministically.
    """
    if not items:
        raise DataError("cannot batch an empty dataset")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.arange(len(items))
    if sort_by_length:
        order = np.argsort([u.features.n_frames for u in items], kind="stable")
    elif rng is not None:
        order = rng.permutation(len(items))
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_by_length and rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([items[j] for j in g], augment) for g in groups]


# --- synthetic corpus ------------------------------------------------------

SYNTH_ALPHABET = string.ascii_lowercase + string.digits


def synth_dataset(
    n_items: int,
    vocab_size: int,
    seed: int,
    out_dir,
    n_test: int = 0,
    noise: float = 0.1,
    n_mels: int = 80,
    min_len: int = 3,
    max_len: int = 12,
    min_frames: int = 4,
    max_frames: int = 8,
) -> Path:
    """Write a learnable toy corpus and return the training manifest path.

    Each non-blank symbol owns one fixed random ``n_mels`` template. An
    utterance is a random symbol string; every symbol contributes its template
    repeated ``min_frames``..``max_frames`` times, plus Gaussian noise. Two equal
    adjacent symbols are separated by a run of silence (zero template) so CTC
    targets stay feasible after 4x subsampling.

    Layout: ``vocab.txt``, ``train.tsv``, ``test.tsv`` (when ``n_test > 0``)
    and ``feats/*.shtn``.
    """
    if vocab_size < 2:
        raise DataError("vocab_size must be >= 2 (blank plus one symbol)")
    if vocab_size - 1 > len(SYNTH_ALPHABET):
        raise DataError(f"vocab_size must be <= {len(SYNTH_ALPHABET) + 1}")
    out = Path(out_dir)
    try:
        (out / "feats").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    vocab = Vocabulary.from_chars(SYNTH_ALPHABET[: vocab_size - 1])
    vocab.save(out / "vocab.txt")
    _, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    templates = synth_templates(vocab_size, seed, n_mels)

    def split(name: str, n: int, ss) -> list[ManifestEntry]:
        rng = np.random.default_rng(ss)
        entries = []
        for i in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            ids = rng.integers(1, vocab_size, size=length)
            segments = []
            for j, tok in enumerate(ids):
                if j and tok == ids[j - 1]:
                    segments.append((0, int(rng.integers(min_frames, max_frames + 1))))
                segments.append((int(tok), int(rng.integers(min_frames, max_frames + 1))))
            frames = np.concatenate([np.repeat(templates[t][None], r, axis=0) for t, r in segments])
            frames = frames + noise * rng.standard_normal(frames.shape)
            rel = f"feats/{name}-{i:05d}.shtn"
            save_tensor(out / rel, frames.astype(np.float32))
            entries.append(ManifestEntry(rel, detokenize(ids, vocab)))
        write_manifest(out / f"{name}.tsv", entries)
        return entries

    split("train", n_items, train_ss)
    if n_test > 0:
        split("test", n_test, test_ss)
    return out / "train.tsv"


def nearest_template_decode(frames: np.ndarray, templates: np.ndarray) -> list[int]:
    """Frame-wise nearest template, collapsed; used as a classifiability oracle for synthetic data."""
    d = ((frames[:, None, :] - templates[None]) ** 2).sum(-1)
    best = d.argmin(1)
    out = []
    prev = -1
    for b in best:
        if b != prev and b != 0:
            out.append(int(b))
        prev = b
    return out


def synth_templates(vocab_size: int, seed: int, n_mels: int = 80) -> np.ndarray:
    """Per-symbol frame templates used by ``synth_dataset``; row 0 is silence."""
    template_ss = np.random.SeedSequence(seed).spawn(3)[0]
    templates = np.random.default_rng(template_ss).standard_normal((vocab_size, n_mels))
    templates[0] = 0.0
    return templates
