"""Cross-entropy variants and the logit-matching MSE used by DER++.

Every function returns ``(loss, dloss_dlogits)``.  Losses are batch means;
the loss value is a Python float computed in float64.
"""
import numpy as np

from .errors import ArgumentError


def _check_labels(labels, lo, hi):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < lo or labels.max() > hi):
        raise ArgumentError(f"labels must lie in [{lo}, {hi}]")
    return labels


def _softmax_ce(z, labels):
    z64 = z.astype(np.float64)
    z64 -= z64.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z64).sum(axis=1))
    n = z.shape[0]
    loss = float(np.mean(logsum - z64[np.arange(n), labels]))
    grad = np.exp(z64 - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def cross_entropy(logits, labels):
    logits = np.asarray(logits)
    c = logits.shape[1]
    labels = _check_labels(labels, 0, c - 1)
    if logits.shape[0] == 0:
        return 0.0, np.zeros_like(logits)
    loss, grad = _softmax_ce(logits, labels)
    return loss, grad.astype(logits.dtype)


def single_head_cross_entropy(logits, labels, class_range):
    """Cross-entropy over the columns ``class_range = (first, last)`` only.

    Columns outside the range receive a gradient of exactly zero.
    """
    logits = np.asarray(logits)
    lo, hi = int(class_range[0]), int(class_range[1])
    if not 0 <= lo <= hi < logits.shape[1]:
        raise ArgumentError(f"class range ({lo}, {hi}) outside [0, {logits.shape[1]})")
    labels = _check_labels(labels, lo, hi)
    grad = np.zeros_like(logits)
    if logits.shape[0] == 0:
        return 0.0, grad
    loss, sub = _softmax_ce(logits[:, lo:hi + 1], labels - lo)
    grad[:, lo:hi + 1] = sub
    return loss, grad


def mse(logits, targets):
    """Mean squared error over every element of the logit matrix."""
    logits = np.asarray(logits)
    if logits.size == 0:
        return 0.0, np.zeros_like(logits)
    diff = logits.astype(np.float64) - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(diff ** 2))
    return loss, (2.0 * diff / diff.size).astype(logits.dtype)
