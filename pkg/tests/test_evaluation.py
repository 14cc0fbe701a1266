import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encrl.errors import ConfigError
from encrl.evaluation import corpus_wer, default_unit, edit_distance, evaluate, split_units
from encrl.frontend import Vocabulary
from encrl.model import build_model, count_params

import oracles
from conftest import toy_config

tokens = st.lists(st.sampled_from("abc"), max_size=8)


def test_edit_distance_examples():
    assert edit_distance("abc", "abc") == (0, 0, 0, 0)
    assert edit_distance("kitten", "sitting")[0] == 3
    assert edit_distance("abc", "") == (3, 0, 0, 3)
    assert edit_distance("", "ab") == (2, 0, 2, 0)


def test_edit_distance_matches_recursion_exhaustively():
    # every pair of strings over {a,b,c} with lengths <= 3
    short = [p for n in range(4) for p in itertools.product("abc", repeat=n)]
    for ref in short:
        for hyp in short:
            assert edit_distance(ref, hyp)[0] == oracles.edit_distance_recursive(ref, hyp)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=6), st.lists(st.sampled_from("abc"), max_size=6))
def test_edit_distance_recursion_and_decomposition(ref, hyp):
    dist, s, i, d = edit_distance(ref, hyp)
    assert dist == oracles.edit_distance_recursive(ref, hyp)
    assert dist == s + i + d
    assert len(ref) - d + i == len(hyp)


@settings(max_examples=100, deadline=None)
@given(tokens, tokens)
def test_edit_distance_symmetric(a, b):
    assert edit_distance(a, b)[0] == edit_distance(b, a)[0]


@settings(max_examples=100, deadline=None)
@given(tokens, tokens, tokens)
def test_triangle_inequality(a, b, c):
    assert edit_distance(a, c)[0] <= edit_distance(a, b)[0] + edit_distance(b, c)[0]


def test_tie_break_prefers_substitution():
    assert edit_distance("ab", "ba") == (2, 2, 0, 0)


def test_corpus_wer_examples():
    assert corpus_wer([("a b c", "a b c"), ("d e", "d e")]).wer == 0.0
    assert corpus_wer([("a b c d", "a c d")]).wer == 0.25
    pooled = corpus_wer([("a b c d", "a c d"), ("e", "e")])
    assert pooled.wer == pytest.approx(1 / 5)
    assert pooled.wer != np.mean([0.25, 0.0])


def test_corpus_wer_can_exceed_one():
    assert corpus_wer([("a", "b c d")]).wer == 3.0


def test_corpus_wer_empty_rejected():
    with pytest.raises(ValueError):
        corpus_wer([])


def test_corpus_wer_order_invariant():
    rng = np.random.default_rng(0)
    words = "a b c d e".split()
    pairs = [(" ".join(rng.choice(words, 5)), " ".join(rng.choice(words, 4))) for _ in range(10)]
    base = corpus_wer(pairs)
    for _ in range(5):
        shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
        again = corpus_wer(shuffled)
        assert (again.wer, again.substitutions, again.insertions, again.deletions) == (
            base.wer, base.substitutions, base.insertions, base.deletions,
        )


def test_token_units():
    assert split_units("ab c", "token") == ["a", "b", "c"]
    assert split_units("ab c", "word") == ["ab", "c"]
    assert default_unit(Vocabulary.from_chars("abc")) == "token"
    assert default_unit(Vocabulary.from_chars("ab ")) == "word"
    with pytest.raises(ConfigError):
        split_units("x", "phone")


def test_report_text_format():
    report = corpus_wer([("a b", "a c"), ("d", "d")], worst_k=3)
    text = report.to_text()
    lines = text.splitlines()
    assert lines[0] == "wer=0.333333"
    assert "worst:" in lines
    assert lines[-1].startswith("summary: wer=0.333333")
    assert report.worst == [(0, 1, "a b", "a c")]


def test_overfit_model_scores_zero(overfit_run):
    _, data, result = overfit_run
    assert evaluate(result.model, data.train, data.vocab).wer == 0.0


def test_random_model_near_chance(synthetic_test):
    cfg = toy_config()
    model = build_model(cfg.model_config(len(synthetic_test.vocab)), np.random.default_rng(0))
    report = evaluate(model, synthetic_test.train, synthetic_test.vocab)
    assert report.wer > 0.8
    assert report.n_params == count_params(model)
    assert report.meta["unit"] == "token"


def test_evaluate_idempotent(overfit_run):
    _, data, result = overfit_run
    first = evaluate(result.model, data.train, data.vocab).to_text()
    assert evaluate(result.model, data.train, data.vocab).to_text() == first


def test_evaluate_vocab_mismatch(overfit_run):
    _, data, result = overfit_run
    with pytest.raises(ConfigError):
        evaluate(result.model, data.train, Vocabulary.from_chars("abcdefg"))
