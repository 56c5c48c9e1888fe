from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcgnn.autodiff import Parameter, ShapeError, Tape, backward, constant, finite_difference_gradient
from lcgnn.contrastive import (
    MemoryBank,
    infonce_loss,
    init_memory_bank,
    label_contrastive_loss_batch,
    label_contrastive_loss_single,
    replace_bank_entries,
)

LN_1P_EINV = math.log1p(math.exp(-1.0))  # 0.31326...


def bank_of(keys, labels):
    bank = init_memory_bank(labels, np.asarray(keys).shape[1])
    bank.keys[:] = keys
    return bank


# --------------------------------------------------------------------------
# bank


def test_bank_capacity_and_seed():
    a = init_memory_bank([0, 1, 1, 0, 1], 6, seed=3)
    b = init_memory_bank([0, 1, 1, 0, 1], 6, seed=3)
    assert a.capacity == 5 and a.dim == 6
    np.testing.assert_array_equal(a.keys, b.keys)
    assert np.all(a.updated_epoch == -1)


def test_bank_rejects_bad_dim():
    with pytest.raises(ValueError):
        init_memory_bank([0, 1], 0)


def test_bank_labels_read_only():
    bank = init_memory_bank([0, 1], 2)
    with pytest.raises(ValueError):
        bank.labels[0] = 1


def test_replace_leaves_other_slots():
    bank = init_memory_bank([0, 1, 0], 2, seed=0)
    before = bank.keys[1].copy()
    replace_bank_entries(bank, [0], [[5.0, 5.0]])
    np.testing.assert_array_equal(bank.keys[1], before)
    np.testing.assert_array_equal(bank.keys[0], [5.0, 5.0])


def test_replace_last_writer_wins():
    bank = init_memory_bank([0, 1], 2, seed=0)
    replace_bank_entries(bank, [0], [[1.0, 1.0]], epoch=1)
    replace_bank_entries(bank, [0], [[2.0, 3.0]], epoch=2)
    np.testing.assert_array_equal(bank.keys[0], [2.0, 3.0])
    assert bank.updated_epoch.tolist() == [2, -1]


def test_replace_all_slots():
    bank = init_memory_bank([0, 1, 1], 2, seed=0)
    new = np.arange(6.0).reshape(3, 2)
    replace_bank_entries(bank, [2, 0, 1], new[[2, 0, 1]])
    np.testing.assert_array_equal(bank.keys, new)


def test_replace_rejects_duplicates_and_bad_input():
    bank = init_memory_bank([0, 1], 2)
    with pytest.raises(ValueError, match="duplicate"):
        replace_bank_entries(bank, [0, 0], np.ones((2, 2)))
    with pytest.raises(IndexError):
        replace_bank_entries(bank, [2], np.ones((1, 2)))
    with pytest.raises(ShapeError):
        replace_bank_entries(bank, [0], np.ones((1, 3)))
    with pytest.raises(ValueError):
        replace_bank_entries(bank, [0], [[np.nan, 0.0]])


# --------------------------------------------------------------------------
# label contrastive loss examples


def test_all_positive_is_zero():
    bank = bank_of(np.random.default_rng(0).normal(size=(4, 3)), [1, 1, 1, 1])
    assert label_contrastive_loss_single([0.3, -1.0, 2.0], 1, bank, 0.5).item() == 0.0


def test_symmetric_pair_is_ln2():
    bank = bank_of([[1.0, 0.0], [1.0, 0.0]], [0, 1])
    loss = label_contrastive_loss_single([0.4, 0.9], 0, bank, 0.07).item()
    assert abs(loss - math.log(2)) < 1e-15


def test_worked_example():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    loss = label_contrastive_loss_single([1.0, 0.0], 0, bank, 1.0).item()
    assert abs(loss - LN_1P_EINV) < 1e-15
    assert abs(loss - 0.3133) < 1e-4


def test_no_positive_rejected():
    bank = bank_of([[1.0, 0.0]], [1])
    with pytest.raises(ValueError, match="no positive"):
        label_contrastive_loss_single([1.0, 0.0], 0, bank, 1.0)


def test_batch_of_one_equals_single():
    rng = np.random.default_rng(2)
    bank = bank_of(rng.normal(size=(6, 3)), [0, 1, 2, 0, 1, 2])
    q = rng.normal(size=(1, 3))
    assert label_contrastive_loss_batch(q, [2], bank, 0.3).item() == label_contrastive_loss_single(q[0], 2, bank, 0.3).item()


def test_duplicated_query_same_mean():
    rng = np.random.default_rng(3)
    bank = bank_of(rng.normal(size=(5, 3)), [0, 1, 0, 1, 1])
    q = rng.normal(size=(1, 3))
    once = label_contrastive_loss_batch(q, [1], bank, 0.2).item()
    twice = label_contrastive_loss_batch(np.vstack([q, q]), [1, 1], bank, 0.2).item()
    assert abs(once - twice) < 1e-15


def test_batch_of_three_is_mean_of_singles():
    rng = np.random.default_rng(4)
    bank = bank_of(rng.normal(size=(8, 4)), [0, 1, 0, 1, 0, 1, 0, 1])
    qs, ys = rng.normal(size=(3, 4)), [0, 1, 1]
    batch = label_contrastive_loss_batch(qs, ys, bank, 0.1).item()
    singles = [label_contrastive_loss_single(q, y, bank, 0.1).item() for q, y in zip(qs, ys)]
    assert abs(batch - np.mean(singles)) < 1e-12


def test_batch_rejects_vector_queries():
    bank = bank_of([[1.0, 0.0]], [0])
    with pytest.raises(ShapeError):
        label_contrastive_loss_batch(np.array([1.0, 0.0]), [0], bank, 1.0)


def test_large_logits_stay_finite():
    bank = bank_of([[1000.0, 0.0], [0.0, 1000.0]], [0, 1])
    loss = label_contrastive_loss_single([0.0, 50.0], 0, bank, 0.07).item()
    assert math.isfinite(loss)
    assert abs(loss - 50.0 * 1000.0 / 0.07) / loss < 1e-12


# --------------------------------------------------------------------------
# InfoNCE


def test_infonce_uniform_is_ln_m():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, 0.8]])
    q = [1.0, 1.0]  # q . k = 1 for every key
    assert abs(infonce_loss(q, 2, keys, 0.3).item() - math.log(4)) < 1e-14


def test_infonce_single_key_is_zero():
    assert infonce_loss([1.0, 2.0], 0, [[0.5, -1.0]], 0.07).item() == 0.0


def test_infonce_worked_example():
    loss = infonce_loss([1.0, 0.0], 0, [[1.0, 0.0], [0.0, 1.0]], 1.0).item()
    assert abs(loss - LN_1P_EINV) < 1e-15


def test_infonce_empty_keys_rejected():
    with pytest.raises(ValueError):
        infonce_loss([1.0], 0, np.zeros((0, 1)), 1.0)


# --------------------------------------------------------------------------
# properties

vec = st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3)


def _random_instance(seed, m=None):
    rng = np.random.default_rng(seed)
    m = m or int(rng.integers(2, 12))
    labels = rng.integers(0, 3, m)
    y = int(labels[rng.integers(m)])
    return rng.normal(size=3), y, bank_of(rng.normal(size=(m, 3)), labels), float(rng.uniform(0.05, 2.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**30))
def test_slot_permutation_invariance(seed):
    q, y, bank, tau = _random_instance(seed)
    perm = np.random.default_rng(seed + 1).permutation(bank.capacity)
    shuffled = bank_of(bank.keys[perm], bank.labels[perm])
    a = label_contrastive_loss_single(q, y, bank, tau).item()
    b = label_contrastive_loss_single(q, y, shuffled, tau).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**30), st.floats(-50.0, 50.0))
def test_logit_shift_invariance(seed, c):
    # appending a coordinate where q = 1 and every key = c*tau adds c to every logit
    q, y, bank, tau = _random_instance(seed)
    shifted = bank_of(np.hstack([bank.keys, np.full((bank.capacity, 1), c * tau)]), bank.labels)
    a = label_contrastive_loss_single(q, y, bank, tau).item()
    b = label_contrastive_loss_single(np.append(q, 1.0), y, shifted, tau).item()
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**30), st.floats(0.01, 3.0))
def test_monotone_in_positive_similarity(seed, bump):
    q, y, bank, tau = _random_instance(seed)
    slot = int(np.flatnonzero(bank.labels == y)[0])
    before = label_contrastive_loss_single(q, y, bank, tau).item()
    bank.keys[slot] += bump * q / np.dot(q, q)  # raises q . k_slot by exactly `bump`
    after = label_contrastive_loss_single(q, y, bank, tau).item()
    assert after <= before + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**30))
def test_single_positive_reduces_to_infonce(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 15))
    keys = rng.normal(size=(m, 4))
    pos = int(rng.integers(m))
    labels = np.ones(m, dtype=int)
    labels[pos] = 0
    q, tau = rng.normal(size=4), float(rng.uniform(0.05, 2.0))
    lc = label_contrastive_loss_single(q, 0, bank_of(keys, labels), tau).item()
    assert abs(lc - infonce_loss(q, pos, keys, tau).item()) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**30))
def test_gradient_wrt_query_matches_fd(seed):
    q, y, bank, tau = _random_instance(seed)
    p = Parameter(q.reshape(1, -1))
    with Tape() as tape:
        loss = label_contrastive_loss_single(p, y, bank, tau)
    analytic = backward(tape, loss)[p]
    numeric = finite_difference_gradient(lambda t: label_contrastive_loss_single(t, y, bank, tau), p)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-9:  # all positive: the loss is identically zero
        return
    assert np.linalg.norm(analytic - numeric) / denom < 1e-4


def test_bank_keys_get_no_gradient():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    q = Parameter([[0.2, 0.3]])
    with Tape() as tape:
        loss = label_contrastive_loss_batch(q, [0], bank, 0.5)
    grads = backward(tape, loss)
    assert list(grads) == [q]
    assert isinstance(bank, MemoryBank)
    assert constant(bank.keys).requires_grad is False
