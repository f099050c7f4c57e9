"""Continual weight / gradient importance scores.

Both scores combine the gradient magnitude of the single-head loss on
current-task data with the gradient magnitude of the full-head loss on the
rehearsal buffer; the weight score additionally adds ``|w|``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import single_head_cross_entropy
from .nn import Model, backward, forward


@dataclass
class ImportanceScores:
    """Per-maskable-layer score arrays (same shapes as the weights)."""

    layers: list
    alpha: float
    beta: float

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def _abs_weight_grads(model, x, y, class_range):
    logits, cache = forward(model, x)
    _, d = single_head_cross_entropy(logits, y, class_range)
    grads = backward(model, cache, d)
    return [np.abs(grads.weights[i].astype(np.float64)) for i in model.maskable_indices]


def gradient_terms(model: Model, current_batches, task_range, buffer_data=None, seen_range=None):
    """Return ``(current_term, buffer_term)`` as lists of per-layer arrays.

    ``current_term`` averages ``|dL/dw|`` over the given current-task
    batches (single-head loss on ``task_range``).  ``buffer_term`` is
    ``|dL/dw|`` of the full-head loss over the whole buffer, or zeros when the
    buffer is empty.
    """
    shapes = model.weight_shapes()
    cur = [np.zeros(s) for s in shapes]
    batches = [b for b in current_batches if len(b[1])]
    for x, y in batches:
        for acc, g in zip(cur, _abs_weight_grads(model, x, y, task_range)):
            acc += g
    if batches:
        cur = [c / len(batches) for c in cur]
    buf = [np.zeros(s) for s in shapes]
    if buffer_data is not None and len(buffer_data[1]):
        bx, by = buffer_data
        if seen_range is None:
            seen_range = (0, model.class_count - 1)
        buf = _abs_weight_grads(model, bx, by, seen_range)
    return cur, buf


def compute_cwi(model, current_batches, task_range, buffer_data=None, alpha=0.5, beta=1.0,
                seen_range=None) -> ImportanceScores:
    """``|w| + alpha * |g_current| + beta * |g_buffer|`` per weight."""
    cur, buf = gradient_terms(model, current_batches, task_range, buffer_data, seen_range)
    scores = [np.abs(layer.weight.astype(np.float64)) + alpha * c + beta * b
              for layer, c, b in zip(model.maskable_layers, cur, buf)]
    return ImportanceScores(scores, alpha, beta)


def compute_cgi(model, current_batches, task_range, buffer_data=None, alpha=0.5, beta=1.0,
                seen_range=None) -> ImportanceScores:
    """Like :func:`compute_cwi` without the magnitude term."""
    cur, buf = gradient_terms(model, current_batches, task_range, buffer_data, seen_range)
    return ImportanceScores([alpha * c + beta * b for c, b in zip(cur, buf)], alpha, beta)
