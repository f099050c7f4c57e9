import numpy as np
import pytest

from sparsecl.errors import ArgumentError, StateError
from sparsecl.importance import compute_cgi, compute_cwi
from sparsecl.losses import single_head_cross_entropy
from sparsecl.masks import init_mask, sparsity
from sparsecl.nn import Linear, Model, build_mlp, forward
from sparsecl.tdm import (TdmSchedule, inter_expand, inter_shrink, intra_adjust, tdm_event_kind,
                          tdm_step)


def _mask_1000(s=0.9, seed=0):
    return init_mask([(10, 100)], s, seed=seed)


def test_intra_adjust_n1000_example():
    m = _mask_1000()
    sched = TdmSchedule(s=0.9, p_intra=0.005)
    scores = [np.random.default_rng(1).random((10, 100))]
    m2, removed, grown = intra_adjust(m, scores, sched, np.random.default_rng(2))
    assert removed.size == 5 and grown.size == 5
    assert m2.active_count == 100


def test_intra_adjust_tiny_n_rounds_to_zero():
    m = init_mask([(3, 4)], 0.5, seed=0)
    before = m.flat().copy()
    m2, removed, grown = intra_adjust(m, [np.ones((3, 4))], TdmSchedule(s=0.5), np.random.default_rng(0))
    assert removed.size == grown.size == 0
    np.testing.assert_array_equal(m2.flat(), before)


def test_intra_adjust_too_large_raises():
    m = init_mask([(10, 10)], 0.98, seed=0)  # 2 active
    sched = TdmSchedule(s=0.98, p_intra=0.05)
    with pytest.raises(ArgumentError):
        intra_adjust(m, [np.ones((10, 10))], sched, np.random.default_rng(0))


def test_intra_adjust_set_algebra():
    m = _mask_1000(seed=3)
    before = m.flat().copy()
    sched = TdmSchedule(s=0.9, p_intra=0.05)
    scores = [np.random.default_rng(4).random((10, 100))]
    m2, removed, grown = intra_adjust(m, scores, sched, np.random.default_rng(5))
    after = m2.flat()
    assert before[removed].all()
    assert after[grown].all()
    regrown = np.intersect1d(removed, grown)
    assert not after[np.setdiff1d(removed, regrown)].any()
    assert after.sum() == before.sum()
    np.testing.assert_array_equal(after, (before & ~np.isin(np.arange(1000), removed))
                                  | np.isin(np.arange(1000), grown))


def test_inter_expand_then_shrink():
    m = _mask_1000(seed=6)
    sched = TdmSchedule(s=0.9, p_inter=0.01)
    m1, grown = inter_expand(m, sched, np.random.default_rng(0))
    assert m1.active_count == 110 and grown.size == 10
    scores = np.random.default_rng(7).permutation(1000).astype(float).reshape(10, 100)
    active_before = np.flatnonzero(m1.flat())
    m2, removed = inter_shrink(m1, [scores], sched)
    assert m2.active_count == 100
    expect = active_before[np.argsort(scores.reshape(-1)[active_before])[:10]]
    np.testing.assert_array_equal(np.sort(removed), np.sort(expect))


def test_inter_shrink_equal_scores_removes_lowest_index():
    m = _mask_1000(seed=8)
    sched = TdmSchedule(s=0.9, p_inter=0.01)
    m1, _ = inter_expand(m, sched, np.random.default_rng(0))
    active = np.flatnonzero(m1.flat())
    _, removed = inter_shrink(m1, [np.ones((10, 100))], sched)
    np.testing.assert_array_equal(removed, active[:10])


def test_inter_zero_ratio_is_noop():
    m = _mask_1000()
    sched = TdmSchedule(s=0.9, p_inter=0.0)
    m1, grown = inter_expand(m, sched, np.random.default_rng(0))
    assert grown.size == 0 and m1.active_count == 100
    m2, removed = inter_shrink(m1, [np.ones((10, 100))], sched)
    assert removed.size == 0 and m2.active_count == 100


def test_inter_shrink_outside_warmup_is_state_error():
    with pytest.raises(StateError):
        inter_shrink(_mask_1000(), [np.ones((10, 100))], TdmSchedule(s=0.9))


@pytest.mark.parametrize("bad", [dict(delta_k=0), dict(p_intra=-0.1), dict(p_inter=0.95)])
def test_schedule_validation(bad):
    with pytest.raises(ArgumentError):
        TdmSchedule(s=0.9, **bad)


@pytest.mark.parametrize("t,e,kind", [
    (1, 1, "none"), (1, 5, "intra"), (1, 10, "intra"), (1, 3, "none"),
    (2, 1, "inter_expand"), (2, 5, "inter_shrink"), (2, 10, "intra"), (3, 7, "none"),
])
def test_dispatch_table(t, e, kind):
    assert tdm_event_kind(t, e, TdmSchedule(s=0.9, delta_k=5)) == kind


def test_dispatch_delta_one_combines_expand_and_shrink():
    # with a one-epoch stage both inter halves land on epoch 1
    assert tdm_event_kind(2, 1, TdmSchedule(s=0.9, delta_k=1)) == "inter_expand+inter_shrink"


def _simulate(T, K, sched, n_shape=(10, 100)):
    """Drive the schedule epoch by epoch; returns (task, epoch, kind, sparsity) rows."""
    m = init_mask([n_shape], sched.s, seed=0)
    rng = np.random.default_rng(0)
    score_rng = np.random.default_rng(1)
    calls = {"n": 0}

    def score_fn():
        calls["n"] += 1
        return [score_rng.random(n_shape)]

    trace = []
    for t in range(1, T + 1):
        for e in range(1, K + 1):
            ev = tdm_step(t, e, m, sched, rng, score_fn)
            m = ev.mask
            trace.append((t, e, ev.kind, sparsity(m)))
    return trace, calls["n"]


def test_sparsity_trajectory_expand_then_shrink():
    sched = TdmSchedule(s=0.9, delta_k=5, p_intra=0.005, p_inter=0.01)
    trace, _ = _simulate(3, 12, sched)
    for t, e, kind, sp in trace:
        if t > 1 and e < sched.delta_k:
            assert sp == pytest.approx(0.9 - 0.01), (t, e)
        else:
            assert sp == pytest.approx(0.9), (t, e)
    kinds = [k for *_, k, _ in trace]
    assert kinds.count("inter_expand") == 2 and kinds.count("inter_shrink") == 2
    # intra per task: floor(K/dk) stages, minus the one taken by inter_shrink when t>1
    assert kinds.count("intra") == 3 * 2 - 2


def test_scores_requested_lazily():
    sched = TdmSchedule(s=0.9, delta_k=5)
    _, n_calls = _simulate(2, 4, sched)
    assert n_calls == 0  # no shrink before epoch 5


def test_trajectory_is_deterministic():
    sched = TdmSchedule(s=0.9, delta_k=2, p_intra=0.02, p_inter=0.03)
    a, _ = _simulate(3, 6, sched)
    b, _ = _simulate(3, 6, sched)
    assert a == b


# --- importance scores -------------------------------------------------------


def _batches(model, n=3, bs=6, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=(bs, *model.input_shape)), rng.integers(2, 4, bs)) for _ in range(n)]


def test_cwi_without_gradient_terms_is_magnitude():
    model = build_mlp(5, 4, hidden=(6,), seed=2)
    cwi = compute_cwi(model, _batches(model), (2, 3), alpha=0.0, beta=0.0)
    for sc, layer in zip(cwi, model.maskable_layers):
        np.testing.assert_array_equal(np.argsort(sc, axis=None, kind="stable"),
                                      np.argsort(np.abs(layer.weight), axis=None, kind="stable"))


def test_cwi_empty_buffer_equals_beta_zero():
    model = build_mlp(5, 4, hidden=(6,), seed=2)
    b = _batches(model)
    empty = (np.zeros((0, 5)), np.zeros(0, dtype=int))
    x = compute_cwi(model, b, (2, 3), buffer_data=empty, alpha=0.5, beta=7.0)
    y = compute_cwi(model, b, (2, 3), buffer_data=None, alpha=0.5, beta=0.0)
    for u, v in zip(x, y):
        np.testing.assert_array_equal(u, v)


def _two_param_model():
    lin = Linear(1, 2, dtype=np.float64)
    lin.weight[:] = [[0.7], [-0.4]]
    lin.bias[:] = [0.1, -0.2]
    return Model([lin], (1,), 2, dtype=np.float64)


def test_cwi_matches_finite_differences_two_params():
    model = _two_param_model()
    x, y = np.array([[1.3]]), np.array([1])
    alpha, h = 0.5, 1e-6

    def loss_at(w):
        model.maskable_layers[0].weight[:] = w
        return single_head_cross_entropy(forward(model, x)[0], y, (0, 1))[0]

    w0 = model.maskable_layers[0].weight.copy()
    fd = np.zeros_like(w0)
    for i in range(2):
        wp, wm = w0.copy(), w0.copy()
        wp[i, 0] += h
        wm[i, 0] -= h
        fd[i, 0] = (loss_at(wp) - loss_at(wm)) / (2 * h)
    model.maskable_layers[0].weight[:] = w0
    cwi = compute_cwi(model, [(x, y)], (0, 1), alpha=alpha, beta=1.0)
    np.testing.assert_allclose(cwi.layers[0], np.abs(w0) + alpha * np.abs(fd), rtol=1e-7)
    cgi = compute_cgi(model, [(x, y)], (0, 1), alpha=alpha, beta=1.0)
    np.testing.assert_allclose(cgi.layers[0], alpha * np.abs(fd), rtol=1e-7)


def test_cwi_buffer_term_uses_full_head():
    model = build_mlp(4, 4, hidden=(5,), seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    buf = (rng.normal(size=(7, 4)), rng.integers(0, 4, 7))
    cur = _batches(model, n=1, bs=4)
    with_buf = compute_cwi(model, cur, (2, 3), buffer_data=buf, alpha=0.0, beta=1.0)
    base = compute_cwi(model, cur, (2, 3), alpha=0.0, beta=0.0)
    diff = [a - b for a, b in zip(with_buf, base)]
    assert all((d >= 0).all() for d in diff) and any((d > 0).any() for d in diff)


def test_cwi_monotone_in_weight_magnitude():
    model = build_mlp(5, 4, hidden=(6,), seed=3, dtype=np.float64)
    b = _batches(model, n=2)
    base = compute_cwi(model, b, (2, 3), alpha=0.0, beta=0.0)
    w = model.maskable_layers[0].weight
    w[0, 0] = np.sign(w[0, 0]) * (abs(w[0, 0]) + 1.0)
    bumped = compute_cwi(model, b, (2, 3), alpha=0.0, beta=0.0)
    assert bumped.layers[0][0, 0] >= base.layers[0][0, 0]


def test_scores_nonnegative():
    model = build_mlp(5, 4, hidden=(6,), seed=4)
    cwi = compute_cwi(model, _batches(model), (2, 3), alpha=0.5, beta=1.0)
    assert all((sc >= 0).all() for sc in cwi)
