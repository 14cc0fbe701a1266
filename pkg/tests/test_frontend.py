import filecmp
import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encrl.autodiff import load_tensor
from encrl.errors import DataError, FormatError
from encrl.frontend import (
    LOG_FLOOR,
    AudioClip,
    FeatureSequence,
    Utterance,
    Vocabulary,
    detokenize,
    load_features,
    load_wav,
    make_batches,
    mel_filterbank,
    mel_spectrogram,
    nearest_template_decode,
    read_manifest,
    save_wav,
    spec_augment,
    synth_dataset,
    synth_templates,
    tokenize,
)


def write_pcm(path, samples, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2" if width == 2 else "u1").tobytes())


# --- WAV ---------------------------------------------------------------------


def test_wav_duration_and_zero_payload(tmp_path):
    write_pcm(tmp_path / "z.wav", np.zeros(16000))
    clip = load_wav(tmp_path / "z.wav")
    assert clip.duration == 1.0 and clip.sample_rate == 16000
    assert not clip.samples.any()


def test_wav_scaling(tmp_path):
    write_pcm(tmp_path / "s.wav", [-32768, 0, 16384, 32767])
    np.testing.assert_array_equal(load_wav(tmp_path / "s.wav").samples, [-1.0, 0.0, 0.5, 32767 / 32768])


def test_wav_roundtrip(tmp_path):
    samples = np.round(np.sin(np.arange(800) / 7) * 20000) / 32768
    save_wav(tmp_path / "r.wav", AudioClip(samples.astype(np.float32), 8000))
    clip = load_wav(tmp_path / "r.wav")
    assert clip.sample_rate == 8000
    np.testing.assert_array_equal(clip.samples, samples.astype(np.float32))


def test_wav_rejects_stereo_8bit_truncated_and_garbage(tmp_path):
    write_pcm(tmp_path / "st.wav", np.zeros(20), channels=2)
    write_pcm(tmp_path / "u8.wav", np.zeros(20), width=1)
    write_pcm(tmp_path / "ok.wav", np.zeros(200))
    raw = (tmp_path / "ok.wav").read_bytes()
    (tmp_path / "cut.wav").write_bytes(raw[:-50])
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    for name in ("st.wav", "u8.wav", "cut.wav", "junk.wav"):
        with pytest.raises(FormatError):
            load_wav(tmp_path / name)


# --- mel -------------------------------------------------------------------


def test_mel_frame_count():
    feats = mel_spectrogram(AudioClip(np.random.default_rng(0).normal(size=16000) * 0.1, 16000))
    assert feats.frames.shape == (99, 80)
    assert np.isfinite(feats.frames).all()


def test_mel_zero_signal_hits_floor():
    feats = mel_spectrogram(AudioClip(np.zeros(16000), 16000))
    np.testing.assert_array_equal(feats.frames, np.float32(math.log(LOG_FLOOR)))


def test_mel_short_clip_rejected():
    with pytest.raises(DataError):
        mel_spectrogram(AudioClip(np.zeros(100), 16000))


def test_mel_tone_lands_in_bracketing_filters():
    sr = 16000
    t = np.arange(sr) / sr
    feats = mel_spectrogram(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t), sr))
    _, edges = mel_filterbank(80, 320, sr)
    centres = edges[1:-1]
    below = int(np.searchsorted(centres, 1000.0)) - 1
    assert set(feats.frames.argmax(axis=1)) <= {below, below + 1}


def test_mel_matches_direct_dft():
    sr, win = 16000, 320
    x = np.random.default_rng(1).normal(size=win)
    n = np.arange(win)
    windowed = x * (0.5 - 0.5 * np.cos(2 * np.pi * n / win))
    k = np.arange(win // 2 + 1)
    dft = (windowed[None, :] * np.exp(-2j * np.pi * k[:, None] * n[None, :] / win)).sum(axis=1)
    fb, _ = mel_filterbank(80, win, sr)
    expected = np.log(np.maximum(fb @ np.abs(dft) ** 2, LOG_FLOOR))
    np.testing.assert_allclose(mel_spectrogram(AudioClip(x, sr)).frames[0], expected, rtol=1e-5, atol=1e-5)


def test_mel_shift_covariance():
    x = np.random.default_rng(2).normal(size=16000 + 160)
    full = mel_spectrogram(AudioClip(x, 16000)).frames
    shifted = mel_spectrogram(AudioClip(x[160:], 16000)).frames
    np.testing.assert_allclose(shifted, full[1:], atol=1e-6)


def test_mel_deterministic():
    x = np.random.default_rng(3).normal(size=4000)
    a = mel_spectrogram(AudioClip(x, 16000)).frames
    assert a.tobytes() == mel_spectrogram(AudioClip(x, 16000)).frames.tobytes()


# --- SpecAugment -------------------------------------------------------------


def test_spec_augment_zero_width_is_identity():
    feats = FeatureSequence(np.random.default_rng(0).normal(size=(50, 80)).astype(np.float32))
    out = spec_augment(feats, f_mask=0, t_mask=0, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, feats.frames)


@pytest.mark.parametrize("seed", range(20))
def test_spec_augment_mask_bound_and_determinism(seed):
    frames = np.random.default_rng(seed).uniform(1, 2, size=(60, 80)).astype(np.float32)
    feats = FeatureSequence(frames)
    out = spec_augment(feats, f_mask=27, t_mask=80, rng=np.random.default_rng(seed)).frames
    zero = out == 0
    rows, cols = zero.all(axis=1), zero.all(axis=0)
    # masked cells are exactly a band of frames plus a band of channels
    np.testing.assert_array_equal(zero, rows[:, None] | cols[None, :])
    if not rows.all():
        assert cols.sum() <= 27
    assert zero.sum() <= 27 * 60 + 60 * 80
    again = spec_augment(feats, f_mask=27, t_mask=80, rng=np.random.default_rng(seed)).frames
    assert out.tobytes() == again.tobytes()
    np.testing.assert_array_equal(feats.frames, frames)


# --- tokenizer ---------------------------------------------------------------


def test_tokenize_examples():
    vocab = Vocabulary(["_", "a", "b"])
    assert tokenize("", vocab) == []
    assert tokenize("ab", vocab) == [1, 2]
    assert detokenize([0, 1, 0, 2], vocab) == "ab"


def test_tokenize_reports_unknown_characters():
    with pytest.raises(DataError, match="'z'"):
        tokenize("abz", Vocabulary(["_", "a", "b"]))
    with pytest.raises(DataError):
        tokenize("a_", Vocabulary(["_", "a", "b"]))


@settings(max_examples=1000, deadline=None)
@given(st.text(alphabet="abcdefgh xyz'", max_size=30))
def test_tokenize_roundtrip(text):
    vocab = Vocabulary.from_chars("abcdefgh xyz'")
    assert detokenize(tokenize(text, vocab), vocab) == text


def test_vocabulary_validation_and_persistence(tmp_path):
    with pytest.raises(DataError):
        Vocabulary(["a", "_"])
    with pytest.raises(DataError):
        Vocabulary(["_", "a", "a"])
    vocab = Vocabulary.from_chars("ab c")
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab


# --- synthetic corpus --------------------------------------------------------


def test_synth_layout_and_determinism(tmp_path):
    a = synth_dataset(6, 5, 42, tmp_path / "a", n_test=3)
    b = synth_dataset(6, 5, 42, tmp_path / "b", n_test=3)
    assert a.name == "train.tsv"
    names = ["vocab.txt", "train.tsv", "test.tsv"] + [f"feats/{p.name}" for p in sorted((tmp_path / "a/feats").iterdir())]
    assert len(names) == 3 + 9
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    entries = read_manifest(a)
    assert len(entries) == 6
    for e in entries:
        assert 3 <= len(e.transcript) <= 12
        assert load_tensor(e.path).shape[1] == 80


def test_synth_seed_changes_data(tmp_path):
    synth_dataset(2, 5, 1, tmp_path / "a")
    synth_dataset(2, 5, 2, tmp_path / "b")
    assert (tmp_path / "a/train.tsv").read_text() != (tmp_path / "b/train.tsv").read_text()


def test_synth_empty(tmp_path):
    path = synth_dataset(0, 5, 0, tmp_path)
    assert path.read_text() == ""
    assert read_manifest(path) == []


def test_synth_errors(tmp_path):
    with pytest.raises(DataError):
        synth_dataset(1, 1, 0, tmp_path / "v")
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        synth_dataset(1, 3, 0, tmp_path / "file" / "sub")


def test_synth_frame_runs_and_noise(tmp_path):
    synth_dataset(5, 6, 9, tmp_path, noise=0.0)
    templates = synth_templates(6, 9)
    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    for e in read_manifest(tmp_path / "train.tsv"):
        frames = load_features(e.path).frames
        dist = ((frames[:, None, :] - templates[None].astype(np.float32)) ** 2).sum(-1)
        assert dist.min(axis=1).max() < 1e-10  # every frame is exactly one template
        labels = dist.argmin(axis=1)
        runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, labels, -1]) != 0))
        assert runs.min() >= 4 and runs.max() <= 8
        assert nearest_template_decode(frames, templates) == tokenize(e.transcript, vocab)


def test_synth_noise_level(tmp_path):
    synth_dataset(20, 4, 5, tmp_path, noise=0.1)
    templates = synth_templates(4, 5)
    resid = []
    for e in read_manifest(tmp_path / "train.tsv"):
        frames = load_features(e.path).frames.astype(np.float64)
        nearest = ((frames[:, None, :] - templates[None]) ** 2).sum(-1).argmin(axis=1)
        resid.append(frames - templates[nearest])
    assert abs(np.concatenate(resid).std() - 0.1) < 0.005


# --- batching ----------------------------------------------------------------


def _utterances(lengths, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Utterance(FeatureSequence(rng.normal(size=(n, 4)).astype(np.float32)), [1] * (i % 3 + 1), "a" * (i % 3 + 1))
        for i, n in enumerate(lengths)
    ]


def test_batches_sizes_and_padding():
    items = _utterances([5, 9, 3, 7, 4, 6, 8, 2, 10, 1])
    batches = make_batches(items, 4)
    assert [len(b) for b in batches] == [4, 4, 2]
    b = batches[0]
    assert b.features.shape == (4, 9, 4)
    np.testing.assert_array_equal(b.feature_lengths, [5, 9, 3, 7])
    np.testing.assert_array_equal(b.target_lengths, [1, 2, 3, 1])
    for i, n in enumerate(b.feature_lengths):
        np.testing.assert_array_equal(b.features[i, :n], items[i].features.frames)
        assert not b.features[i, n:].any()
        assert not b.targets[i, b.target_lengths[i] :].any()


def test_batches_shuffle_deterministic():
    items = _utterances(range(1, 21))
    first = make_batches(items, 6, rng=np.random.default_rng(5))
    second = make_batches(items, 6, rng=np.random.default_rng(5))
    other = make_batches(items, 6, rng=np.random.default_rng(6))
    lengths = lambda bs: [tuple(b.feature_lengths) for b in bs]  # noqa: E731
    assert lengths(first) == lengths(second)
    assert lengths(first) != lengths(other)
    assert sorted(n for b in first for n in b.feature_lengths) == list(range(1, 21))


def test_batches_sorted_by_length():
    batches = make_batches(_utterances([5, 1, 4, 2, 3]), 2, sort_by_length=True)
    assert [list(b.feature_lengths) for b in batches] == [[1, 2], [3, 4], [5]]


def test_batches_empty_rejected():
    with pytest.raises(DataError):
        make_batches([], 4)
