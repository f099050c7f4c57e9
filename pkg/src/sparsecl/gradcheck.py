"""Central-difference verification of the hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import cross_entropy
from .nn import Model, ReLU, backward, forward

# step and relative-error floor per precision
_STEP = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}
_FLOOR = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-9}


@dataclass
class GradCheckReport:
    tol: float
    checked: int
    skipped: int
    max_rel_error: float
    worst: tuple | None
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tol

    def to_dict(self):
        return {
            "passed": self.passed,
            "tol": self.tol,
            "checked": self.checked,
            "skipped": self.skipped,
            "max_rel_error": self.max_rel_error,
            "worst": None if self.worst is None else list(self.worst),
            "failures": [list(f) for f in self.failures],
        }


def _loss(model, x, y):
    logits, cache = forward(model, x)
    loss, _ = cross_entropy(logits, y)
    pattern = [c for layer, c in zip(model.layers, cache.layer_caches) if isinstance(layer, ReLU)]
    return loss, pattern


def _param(model, layer_idx, kind):
    layer = model.layers[layer_idx]
    return layer.weight if kind == "weight" else layer.bias


def numeric_grad_check(model: Model, batch, labels, n_samples=200, tol=None, grads=None,
                       include=(), seed=0) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled parameters.

    The analytic gradient is taken in the model's own precision.  The
    reference difference quotient is always evaluated on a float64 copy so
    that a float32 model is judged on its gradient code, not on float32
    cancellation in the quotient.  Samples whose perturbation flips any ReLU
    are skipped (the loss has a kink there) and redrawn.

    ``grads`` substitutes a precomputed ``GradientSet`` for the analytic side;
    ``include`` lists ``(layer_idx, "weight"|"bias", flat_idx)`` entries that
    are always checked.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    dtype = model.dtype
    tol = tol if tol is not None else (1e-4 if dtype == np.float32 else 1e-6)
    h = _STEP[dtype]
    floor = _FLOOR[dtype]
    if grads is None:
        logits, cache = forward(model, batch)
        _, dlogits = cross_entropy(logits, labels)
        grads = backward(model, cache, dlogits)

    ref = model.astype(np.float64)
    x64 = np.asarray(batch, dtype=np.float64)
    _, base_pattern = _loss(ref, x64, labels)

    params = []
    for i in model.maskable_indices:
        params.append((i, "weight", model.layers[i].weight.size))
        params.append((i, "bias", model.layers[i].bias.size))
    sizes = np.array([p[2] for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    rng = np.random.default_rng(seed)
    queue = [tuple(e) for e in include]
    for g in rng.permutation(total):
        t = int(np.searchsorted(offsets, g, side="right") - 1)
        queue.append((params[t][0], params[t][1], int(g - offsets[t])))

    checked = skipped = 0
    worst, max_err = None, 0.0
    failures = []
    seen = set()
    for entry in queue:
        if checked >= n_samples + len(include):
            break
        if entry in seen:
            continue
        seen.add(entry)
        layer_idx, kind, flat = entry
        p = _param(ref, layer_idx, kind).reshape(-1)
        old = p[flat]
        p[flat] = old + h
        lp, pat_p = _loss(ref, x64, labels)
        p[flat] = old - h
        lm, pat_m = _loss(ref, x64, labels)
        p[flat] = old
        if any(not np.array_equal(a, b) for a, b in zip(pat_p, base_pattern)) or any(
            not np.array_equal(a, b) for a, b in zip(pat_m, base_pattern)
        ):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * h)
        g = grads.weights[layer_idx] if kind == "weight" else grads.biases[layer_idx]
        analytic = float(g.reshape(-1)[flat])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        checked += 1
        if worst is None or err > max_err:
            max_err, worst = err, entry
        if err > tol:
            failures.append((layer_idx, kind, flat, analytic, numeric, err))
    return GradCheckReport(tol, checked, skipped, max_err, worst, failures)
