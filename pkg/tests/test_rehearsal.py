import json

import numpy as np
import pytest

from sparsecl.errors import StateError
from sparsecl.losses import cross_entropy, mse, single_head_cross_entropy
from sparsecl.nn import build_mlp, forward
from sparsecl.rehearsal import (BufferEntry, RehearsalBuffer, derpp_loss, er_loss, insert_batch,
                                plain_loss, reservoir_insert, sample_batch, sample_indices)


def _entry(i, C=3):
    return BufferEntry(np.full(2, float(i)), i % C, np.zeros(C), task_id=0)


def test_fill_phase_keeps_everything():
    buf = RehearsalBuffer(10)
    rng = np.random.default_rng(0)
    for i in range(10):
        assert reservoir_insert(buf, _entry(i), rng)
    assert len(buf) == 10 and buf.seen_count == 10
    assert sorted(e.insertion_id for e in buf.entries) == list(range(10))


def test_reservoir_inclusion_frequency():
    trials, stream, cap = 10_000, 100, 10
    hits = np.zeros(stream)
    rng = np.random.default_rng(2024)
    for _ in range(trials):
        buf = RehearsalBuffer(cap, (1,), 1)
        for i in range(stream):
            reservoir_insert(buf, BufferEntry(np.array([i]), 0, np.zeros(1), 0), rng)
        hits[buf.insertion_ids] += 1
    freq = hits / trials
    assert np.all(np.abs(freq - 0.1) <= 0.02), (freq.min(), freq.max())


def test_capacity_zero_stays_empty_and_er_is_plain_ce():
    buf = RehearsalBuffer(0)
    rng = np.random.default_rng(0)
    for i in range(20):
        assert not reservoir_insert(buf, _entry(i), rng)
    assert len(buf) == 0 and buf.seen_count == 20
    model = build_mlp(3, 4, hidden=(5,), seed=0)
    x = np.random.default_rng(1).normal(size=(6, 3))
    y = np.array([2, 3, 2, 3, 2, 3])
    replay = sample_batch(buf, 0, rng)
    assert replay == []
    a = er_loss(model, (x, y), None, (2, 3))
    b = single_head_cross_entropy(forward(model, x)[0], y, (2, 3))[0]
    assert a.loss == pytest.approx(b, rel=1e-12)


def test_buffer_invariants():
    buf = RehearsalBuffer(7)
    rng = np.random.default_rng(3)
    for i in range(50):
        reservoir_insert(buf, _entry(i), rng)
        assert len(buf) <= buf.capacity and buf.seen_count >= len(buf)


def test_sample_edge_cases():
    buf = RehearsalBuffer(4)
    rng = np.random.default_rng(0)
    assert sample_indices(buf, 0, rng).size == 0
    with pytest.raises(StateError):
        sample_indices(buf, 1, rng)
    reservoir_insert(buf, _entry(42), rng)
    got = sample_batch(buf, 5, rng)
    assert len(got) == 5 and all(e.input[0] == 42 for e in got)


def test_sample_is_uniform():
    buf = RehearsalBuffer(8)
    rng = np.random.default_rng(1)
    for i in range(8):
        reservoir_insert(buf, _entry(i), rng)
    n = 16_000
    counts = np.bincount(sample_indices(buf, n, rng), minlength=8)
    chi2 = ((counts - n / 8) ** 2 / (n / 8)).sum()
    assert chi2 < 24.3  # chi-square, 7 dof, p = 0.001


def test_insert_batch_and_jsonl(tmp_path):
    buf = RehearsalBuffer(5, (2,), 3)
    rng = np.random.default_rng(0)
    stored = insert_batch(buf, np.ones((8, 2)), np.arange(8) % 3, np.zeros((8, 3)), 1, rng)
    assert stored >= 5 and len(buf) == 5
    path = tmp_path / "buf.jsonl"
    buf.to_jsonl(path, include_inputs=True)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 5 and rows[0]["task_id"] == 1 and rows[0]["input"] == [1.0, 1.0]


# --- replay losses -----------------------------------------------------------


def _setup(seed=0, C=4):
    model = build_mlp(3, C, hidden=(5,), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(6, 3))
    y = rng.integers(2, 4, 6)
    return model, x, y


def test_er_empty_buffer_is_single_head():
    model, x, y = _setup()
    empty = (x[:0], y[:0])
    r = er_loss(model, (x, y), empty, (2, 3))
    assert r.loss == pytest.approx(single_head_cross_entropy(forward(model, x)[0], y, (2, 3))[0])
    assert r.parts == [6, 0]


def test_er_composes_term_by_term():
    model, x, y = _setup()
    rng = np.random.default_rng(5)
    rx, ry = rng.normal(size=(4, 3)), rng.integers(0, 4, 4)
    r = er_loss(model, (x, y), (rx, ry), (2, 3), seen_range=(0, 3))
    z_cur = forward(model, x)[0]
    z_buf = forward(model, rx)[0]
    expect = single_head_cross_entropy(z_cur, y, (2, 3))[0] + cross_entropy(z_buf, ry)[0]
    assert r.loss == pytest.approx(expect, rel=1e-12)
    # identical batches with identical ranges -> twice the single term
    r2 = er_loss(model, (x, y), (x, y), (0, 3), seen_range=(0, 3))
    assert r2.loss == pytest.approx(2 * cross_entropy(z_cur, y)[0], rel=1e-12)


def test_er_zero_weight_model_uniform_logits():
    model, x, y = _setup()
    for layer in model.maskable_layers:
        layer.weight[:] = 0
        layer.bias[:] = 0
    rx, ry = x.copy(), np.array([0, 1, 2, 3, 0, 1])
    r = er_loss(model, (x, y), (rx, ry), (2, 3), seen_range=(0, 3))
    assert r.loss == pytest.approx(np.log(2) + np.log(4), rel=1e-12)


def test_derpp_zero_coefficients():
    model, x, y = _setup()
    rng = np.random.default_rng(9)
    a = (rng.normal(size=(3, 3)), rng.integers(0, 4, 3), rng.normal(size=(3, 4)))
    b = (rng.normal(size=(3, 3)), rng.integers(0, 4, 3))
    r = derpp_loss(model, (x, y), a, b, 0.0, 0.0, (2, 3))
    assert r.loss == pytest.approx(single_head_cross_entropy(forward(model, x)[0], y, (2, 3))[0])
    assert not r.dlogits[6:].any()


def test_derpp_mse_fixed_point():
    model, x, y = _setup()
    stored = forward(model, x)[0]
    r = derpp_loss(model, (x, y), (x, y, stored), None, 0.5, 0.5, (2, 3))
    assert r.terms["replay_mse"] == 0.0
    assert not r.dlogits[6:12].any()


def test_derpp_gradient_matches_finite_differences():
    model, x, y = _setup(seed=3)
    rng = np.random.default_rng(11)
    a = (rng.normal(size=(3, 3)), rng.integers(0, 4, 3), rng.normal(size=(3, 4)))
    b = (rng.normal(size=(2, 3)), rng.integers(0, 4, 2))
    args = dict(batch_a=a, batch_b=b, coeff_mse=0.7, coeff_ce=0.4, task_range=(2, 3),
                seen_range=(0, 3))
    r = derpp_loss(model, (x, y), **args)
    grads = r.gradients(model)
    h = 1e-6
    for li in model.maskable_indices:
        w = model.layers[li].weight
        for idx in [(0, 0), (1, 2), (w.shape[0] - 1, w.shape[1] - 1)]:
            old = w[idx]
            w[idx] = old + h
            lp = derpp_loss(model, (x, y), **args).loss
            w[idx] = old - h
            lm = derpp_loss(model, (x, y), **args).loss
            w[idx] = old
            fd = (lp - lm) / (2 * h)
            assert grads.weights[li][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_derpp_matches_manual_composition():
    model, x, y = _setup(seed=4)
    rng = np.random.default_rng(2)
    a = (rng.normal(size=(3, 3)), rng.integers(0, 4, 3), rng.normal(size=(3, 4)))
    b = (rng.normal(size=(3, 3)), rng.integers(0, 4, 3))
    r = derpp_loss(model, (x, y), a, b, 0.3, 0.6, (2, 3), (0, 3))
    expect = (single_head_cross_entropy(forward(model, x)[0], y, (2, 3))[0]
              + 0.3 * mse(forward(model, a[0])[0], a[2])[0]
              + 0.6 * cross_entropy(forward(model, b[0])[0], b[1])[0])
    assert r.loss == pytest.approx(expect, rel=1e-12)


def test_plain_loss_is_full_head_over_seen_classes():
    model, x, y = _setup()
    r = plain_loss(model, (x, y), (2, 3))
    assert r.loss == pytest.approx(cross_entropy(forward(model, x)[0], y)[0], rel=1e-12)
    r = plain_loss(model, (x, y), (2, 3), seen_range=(1, 3))
    z = forward(model, x)[0][:, 1:]
    assert r.loss == pytest.approx(cross_entropy(z, y - 1)[0], rel=1e-12)


def test_plain_loss_gradient_scales_linearly_with_upstream():
    model, x, y = _setup()
    r = plain_loss(model, (x, y), (2, 3))
    g1 = r.gradients(model)
    r.dlogits = r.dlogits * 3.0
    g3 = r.gradients(model)
    for a, b in zip(g1.weights, g3.weights):
        if a is not None:
            np.testing.assert_allclose(3 * a, b, rtol=1e-12)


def test_negative_coefficients_rejected():
    model, x, y = _setup()
    with pytest.raises(ValueError):
        derpp_loss(model, (x, y), None, None, -0.1, 0.5, (2, 3))
