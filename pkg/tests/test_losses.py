import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encrl import autodiff as ad
from encrl.errors import ConfigError, DataError, ShapeError
from encrl.losses import (
    clip_loss,
    ctc_greedy_decode,
    ctc_loss,
    ctc_min_input_length,
    encrl_loss,
    mae_loss,
    mse_loss,
    tempered_softmax,
)

import gradcases
import oracles


def ctc_single(log_probs, target, **kw):
    lp = log_probs if isinstance(log_probs, ad.Tensor) else ad.Tensor(np.asarray(log_probs, dtype=np.float64))
    lp = lp.reshape(1, *lp.shape)
    tgt = np.array([list(target) or [0]])
    return ctc_loss(lp, np.array([lp.shape[1]]), tgt, np.array([len(target)]), **kw)


# --- CTC ---------------------------------------------------------------------


def test_ctc_single_alignment():
    loss = ctc_single(np.log([[0.4, 0.6]]), [1])
    assert abs(loss.item() - (-math.log(0.6))) < 1e-12


def test_ctc_uniform_two_frames():
    loss = ctc_single(np.log(np.full((2, 2), 0.5)), [1])
    assert abs(loss.item() - (-math.log(0.75))) < 1e-9


@pytest.mark.parametrize("seed", range(60))
def test_ctc_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    log_probs, target = oracles.random_ctc_instance(rng)
    assert abs(ctc_single(log_probs, target).item() - oracles.ctc_enumerate(log_probs, target)) < 1e-8


def test_ctc_gradient_matches_finite_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        log_probs, target = oracles.random_ctc_instance(rng)
        x = ad.Tensor(log_probs.copy(), requires_grad=True)
        err = ad.grad_check(lambda: ctc_single(ad.log_softmax(x, axis=-1), target), [x])
        assert err < 1e-5


def test_ctc_infeasible_target_rejected():
    with pytest.raises(DataError):
        ctc_single(np.log(np.full((2, 3), 1 / 3)), [1, 1])
    assert ctc_min_input_length([1, 1]) == 3 and ctc_min_input_length([1, 2]) == 2


def test_ctc_batch_matches_items_and_ignores_padding():
    rng = np.random.default_rng(3)
    items = [oracles.random_ctc_instance(rng) for _ in range(4)]
    t_max = max(lp.shape[0] for lp, _ in items)
    v = 4
    batch = np.full((4, t_max, v), np.log(1 / v))
    targets = np.zeros((4, 3), dtype=int)
    for i, (lp, tgt) in enumerate(items):
        padded = np.full((lp.shape[0], v), -50.0)
        padded[:, : lp.shape[1]] = lp
        padded -= np.log(np.exp(padded).sum(axis=1, keepdims=True))
        batch[i, : lp.shape[0]] = padded
        targets[i, : len(tgt)] = tgt
    in_len = np.array([lp.shape[0] for lp, _ in items])
    tgt_len = np.array([len(t) for _, t in items])
    losses = ctc_loss(ad.Tensor(batch), in_len, targets, tgt_len).data
    for i in range(4):
        expected = oracles.ctc_enumerate(batch[i, : in_len[i]], items[i][1])
        assert abs(losses[i] - expected) < 1e-8
    perm = np.array([2, 0, 3, 1])
    permuted = ctc_loss(ad.Tensor(batch[perm]), in_len[perm], targets[perm], tgt_len[perm]).data
    np.testing.assert_allclose(permuted, losses[perm], atol=1e-12)
    mean = ctc_loss(ad.Tensor(batch[perm]), in_len[perm], targets[perm], tgt_len[perm], reduction="mean").item()
    assert abs(mean - losses.mean()) < 1e-7


def test_greedy_decode_examples():
    def onehot(ids, v=3):
        lp = np.full((len(ids), v), -10.0)
        lp[np.arange(len(ids)), ids] = 0.0
        return lp[None]

    assert ctc_greedy_decode(onehot([1, 1, 0, 1, 2, 2]), np.array([6])) == [[1, 1, 2]]
    assert ctc_greedy_decode(onehot([0, 0, 0]), np.array([3])) == [[]]
    assert ctc_greedy_decode(onehot([1, 2, 2, 1]), np.array([2])) == [[1, 2]]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_greedy_decode_of_one_hot_path(path):
    lp = np.full((1, len(path), 5), -5.0)
    lp[0, np.arange(len(path)), path] = 0.0
    assert tuple(ctc_greedy_decode(lp, np.array([len(path)]))[0]) == oracles.collapse(path)


# --- CLIP ----------------------------------------------------------------------


def test_clip_single_item_is_zero():
    assert clip_loss(np.array([[0.3, -1.0]]), np.array([[2.0, 5.0]])).item() == 0.0


def test_clip_closed_forms():
    eye = np.eye(2)
    aligned = clip_loss(eye, eye, temperature=1.0).item()
    assert abs(aligned - (-math.log(math.e / (math.e + 1)))) < 1e-6
    swapped = clip_loss(eye, eye[::-1], temperature=1.0).item()
    assert abs(swapped - (-math.log(1 / (math.e + 1)))) < 1e-6
    assert swapped > aligned


def test_clip_rejects_nonpositive_temperature():
    with pytest.raises(ConfigError):
        clip_loss(np.eye(2), np.eye(2), temperature=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_clip_invariances(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    base = clip_loss(a, b).item()
    perm = rng.permutation(6)
    assert abs(clip_loss(a[perm], b[perm]).item() - base) < 1e-9
    scaled = clip_loss(a * rng.uniform(0.1, 10, (6, 1)), b * rng.uniform(0.1, 10, (6, 1))).item()
    assert abs(scaled - base) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_clip_aligned_is_minimum_over_permutations(seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(4, 3))
    aligned = clip_loss(e, e).item()
    for _ in range(10):
        assert aligned <= clip_loss(e, e[rng.permutation(4)]).item() + 1e-12


# --- MSE / MAE -------------------------------------------------------------


def test_mse_mae_examples():
    assert mse_loss(np.ones((2, 3)), np.ones((2, 3))).item() == 0.0
    assert mse_loss(np.array([1.0, 2.0]), np.zeros(2)).item() == 2.5
    assert mae_loss(np.ones((2, 3)), np.ones((2, 3))).item() == 0.0
    assert mae_loss(np.array([1.0, 2.0]), np.zeros(2)).item() == 1.5


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        mse_loss(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        mae_loss(np.ones(3), np.ones(4))


def test_masked_padding_leaves_value_unchanged():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3))
    pad_a = np.concatenate([a, rng.normal(size=(1, 3, 3))], axis=1)
    pad_b = np.concatenate([b, rng.normal(size=(1, 3, 3))], axis=1)
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]], bool)
    for fn in (mse_loss, mae_loss):
        assert abs(fn(pad_a, pad_b, mask).item() - fn(a, b).item()) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_mae_bounded_by_root_mse(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
    assert mae_loss(a, b).item() <= math.sqrt(mse_loss(a, b).item()) + 1e-12


# --- combined --------------------------------------------------------------


def _encrl_inputs(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 4, 6))


def test_encrl_identical_models_leave_only_clip():
    e, _, b, _ = _encrl_inputs(0)
    mask = np.ones((3, 4), bool)
    total, parts = encrl_loss(e, e, b, b, mask, "clip+mse")
    assert parts["mse"] == 0.0
    assert total.item() == parts["clip"]


def test_encrl_single_terms_match_direct_losses():
    e_ref, e_lw, b_ref, b_lw = _encrl_inputs(1)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], bool)
    assert encrl_loss(e_ref, e_lw, b_ref, b_lw, mask, "mse")[0].item() == mse_loss(b_ref, b_lw, mask).item()
    assert encrl_loss(e_ref, e_lw, b_ref, b_lw, mask, "mae")[0].item() == mae_loss(b_ref, b_lw, mask).item()


@pytest.mark.parametrize("mode", ["clip", "mae", "mse", "clip+mae", "clip+mse", "CLIP+MSE"])
def test_encrl_breakdown_sums_to_total(mode):
    e_ref, e_lw, b_ref, b_lw = _encrl_inputs(2)
    mask = np.ones((3, 4), bool)
    total, parts = encrl_loss(e_ref, e_lw, b_ref, b_lw, mask, mode, weights={"clip": 0.5, "mse": 2.0})
    assert abs(sum(parts.values()) - total.item()) < 1e-7


def test_encrl_unknown_mode_rejected():
    e_ref, e_lw, b_ref, b_lw = _encrl_inputs(3)
    with pytest.raises(ConfigError):
        encrl_loss(e_ref, e_lw, b_ref, b_lw, np.ones((3, 4), bool), "kl")


@pytest.mark.parametrize("name", sorted(gradcases.LOSSES))
def test_loss_gradients(name):
    assert max(gradcases.run_case(gradcases.LOSSES[name], s) for s in range(5)) < 1e-4


# --- tempered softmax ------------------------------------------------------


def test_tempered_softmax_examples():
    z = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(tempered_softmax(z, 1.0).data, ad.softmax(ad.Tensor(z)).data)
    np.testing.assert_allclose(tempered_softmax(np.array([2.0, 0.0]), 2.0).data, [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_allclose(tempered_softmax(z, 1e4).data, 1 / 3, atol=1e-3)
    with pytest.raises(ConfigError):
        tempered_softmax(z, 0.0)
