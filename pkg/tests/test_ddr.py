import numpy as np
import pytest

from sparsecl.ddr import (MisclassCounter, RemovalPolicy, one_shot_remove, record_misclassifications,
                          remove_easiest, removal_quota)
from sparsecl.errors import ArgumentError


def test_all_correct_leaves_counter_unchanged():
    c = MisclassCounter(5)
    record_misclassifications(c, [0, 1, 2], [0, 1, 2], [0, 2, 4])
    assert not c.counts.any()


def test_all_wrong_over_three_epochs():
    c = MisclassCounter(4)
    for _ in range(3):
        record_misclassifications(c, [1, 1, 1, 1], [0, 0, 0, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(c.counts, [3, 3, 3, 3])


def test_mixed_batches_match_scalar_loop():
    rng = np.random.default_rng(0)
    c = MisclassCounter(50)
    ref = {}
    for _ in range(20):
        ids = rng.choice(50, 8, replace=False)
        pred, lab = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
        record_misclassifications(c, pred, lab, ids)
        for i, p, y in zip(ids, pred, lab):
            ref[int(i)] = ref.get(int(i), 0) + int(p != y)
    for i in range(50):
        assert c[i] == ref.get(i, 0)


def test_misaligned_inputs_rejected():
    with pytest.raises(ArgumentError):
        record_misclassifications(MisclassCounter(3), [0, 1], [0], [0, 1])


def test_quota_example():
    p = RemovalPolicy(rho=0.3, cutoff=4, n_t=100)
    assert p.quotas == [7, 8, 7, 8]
    assert sum(p.quotas) == 30
    assert removal_quota(p, 5) == 0 and removal_quota(p, 12) == 0


def test_quota_rho_zero():
    assert RemovalPolicy(0.0, 4, 100).quotas == [0, 0, 0, 0]


@pytest.mark.parametrize("n_t,rho,cutoff", [(100, 0.3, 4), (999, 0.17, 3), (7, 0.5, 5), (1000, 1.0, 7)])
def test_active_size_after_each_stage(n_t, rho, cutoff):
    p = RemovalPolicy(rho, cutoff, n_t)
    active = n_t
    for i in range(1, cutoff + 3):
        active -= removal_quota(p, i)
        expect = n_t - int(np.floor(n_t * rho * min(i, cutoff) / cutoff + 1e-9))
        assert active == expect
    assert n_t - active == int(np.floor(n_t * rho + 1e-9))


@pytest.mark.parametrize("bad", [dict(rho=-0.1, cutoff=4), dict(rho=1.5, cutoff=4), dict(rho=0.3, cutoff=0)])
def test_policy_validation(bad):
    with pytest.raises(ArgumentError):
        RemovalPolicy(n_t=10, **bad)


def test_remove_easiest_matches_full_sort():
    rng = np.random.default_rng(1)
    c = MisclassCounter(30)
    c.counts[:] = rng.permutation(30)
    active = np.arange(30)
    remaining, removed = remove_easiest(active, c, 7)
    np.testing.assert_array_equal(removed, np.sort(np.argsort(c.counts)[:7]))
    assert np.union1d(remaining, removed).size == 30 and np.intersect1d(remaining, removed).size == 0


def test_remove_easiest_ties_lowest_id():
    c = MisclassCounter(10)
    remaining, removed = remove_easiest([9, 3, 5, 1, 7], c, 2)
    np.testing.assert_array_equal(removed, [1, 3])
    np.testing.assert_array_equal(remaining, [5, 7, 9])


def test_remove_easiest_quota_bounds():
    c = MisclassCounter(5)
    remaining, removed = remove_easiest([0, 1, 2], c, 0)
    assert removed.size == 0 and remaining.size == 3
    with pytest.raises(ArgumentError):
        remove_easiest([0, 1, 2], c, 4)


def test_one_shot_basic():
    c = MisclassCounter(100)
    c.counts[:] = np.arange(100)[::-1]
    remaining, removed = one_shot_remove(np.arange(100), c, 0.3, 100)
    assert removed.size == 30 and remaining.size == 70
    np.testing.assert_array_equal(removed, np.arange(70, 100))
    _, none = one_shot_remove(np.arange(100), c, 0.0, 100)
    assert none.size == 0


def test_one_shot_equals_ddr_with_cutoff_one():
    rng = np.random.default_rng(4)
    c = MisclassCounter(60)
    c.counts[:] = rng.integers(0, 4, 60)
    active = rng.permutation(60)
    q = removal_quota(RemovalPolicy(0.3, 1, 60), 1)
    a = remove_easiest(active, c, q)
    b = one_shot_remove(active, c, 0.3, 60)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_reset():
    c = MisclassCounter(3)
    record_misclassifications(c, [1], [0], [2])
    c.reset()
    assert not c.counts.any()
