"""Reservoir-sampled rehearsal buffer and the ER / DER++ replay objectives."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StateError
from .losses import mse, single_head_cross_entropy
from .nn import backward, forward


@dataclass
class BufferEntry:
    input: np.ndarray
    label: int
    stored_logits: np.ndarray
    task_id: int
    insertion_id: int = -1


class RehearsalBuffer:
    """Fixed-capacity memory filled by reservoir sampling over one stream.

    Storage is columnar (preallocated arrays) so sampling is a fancy-index.
    """

    def __init__(self, capacity: int, input_shape=None, class_count=None, dtype=np.float32):
        self.capacity = int(capacity)
        self.seen_count = 0
        self._n = 0
        self.input_shape = None if input_shape is None else tuple(input_shape)
        self.class_count = class_count
        self.dtype = np.dtype(dtype)
        self.inputs = self.labels = self.logits = self.task_ids = self.insertion_ids = None
        if self.input_shape is not None and class_count is not None:
            self._alloc()

    def _alloc(self):
        c = self.capacity
        self.inputs = np.zeros((c, *self.input_shape), dtype=self.dtype)
        self.labels = np.zeros(c, dtype=np.int64)
        self.logits = np.zeros((c, self.class_count), dtype=self.dtype)
        self.task_ids = np.zeros(c, dtype=np.int64)
        self.insertion_ids = np.zeros(c, dtype=np.int64)

    def __len__(self):
        return self._n

    @property
    def entries(self) -> list:
        return [self.entry(i) for i in range(self._n)]

    def entry(self, i) -> BufferEntry:
        return BufferEntry(self.inputs[i].copy(), int(self.labels[i]), self.logits[i].copy(),
                           int(self.task_ids[i]), int(self.insertion_ids[i]))

    def _write(self, slot, candidate: BufferEntry):
        if self.inputs is None:
            self.input_shape = tuple(np.shape(candidate.input))
            self.class_count = len(candidate.stored_logits)
            self._alloc()
        self.inputs[slot] = candidate.input
        self.labels[slot] = candidate.label
        self.logits[slot] = candidate.stored_logits
        self.task_ids[slot] = candidate.task_id
        self.insertion_ids[slot] = self.seen_count

    def data(self, idx=None):
        """``(inputs, labels, stored_logits)`` for ``idx`` (default: all entries)."""
        if idx is None:
            idx = slice(0, self._n)
        return self.inputs[idx], self.labels[idx], self.logits[idx]

    def to_jsonl(self, path, include_inputs=False):
        with open(path, "w") as fh:
            for i in range(self._n):
                row = {"task_id": int(self.task_ids[i]), "label": int(self.labels[i]),
                       "insertion_id": int(self.insertion_ids[i])}
                if include_inputs:
                    row["input"] = self.inputs[i].reshape(-1).tolist()
                fh.write(json.dumps(row) + "\n")


def reservoir_insert(buffer: RehearsalBuffer, candidate: BufferEntry, rng) -> bool:
    """Offer one stream item to the buffer; returns True if it was stored."""
    stored = False
    if buffer.seen_count < buffer.capacity:
        buffer._write(buffer._n, candidate)
        buffer._n += 1
        stored = True
    elif buffer.capacity > 0:
        j = int(rng.integers(0, buffer.seen_count + 1))
        if j < buffer.capacity:
            buffer._write(j, candidate)
            stored = True
    buffer.seen_count += 1
    return stored


def insert_batch(buffer, inputs, labels, logits, task_id, rng) -> int:
    stored = 0
    for x, y, z in zip(inputs, labels, logits):
        stored += reservoir_insert(buffer, BufferEntry(x, int(y), z, task_id), rng)
    return stored


def sample_indices(buffer: RehearsalBuffer, n: int, rng) -> np.ndarray:
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if len(buffer) == 0:
        raise StateError("cannot sample from an empty rehearsal buffer")
    return rng.integers(0, len(buffer), size=n)


def sample_batch(buffer: RehearsalBuffer, n: int, rng) -> list:
    """``n`` entries drawn uniformly with replacement."""
    return [buffer.entry(i) for i in sample_indices(buffer, n, rng)]


# ---------------------------------------------------------------------------
# replay objectives
# ---------------------------------------------------------------------------


@dataclass
class ReplayLoss:
    """Total loss over one concatenated forward pass.

    ``logits``/``dlogits`` stack the current batch followed by each replay
    batch; ``parts`` holds the row count of each piece and ``terms`` the
    individual loss values.
    """

    loss: float
    logits: np.ndarray
    dlogits: np.ndarray
    cache: object
    parts: list
    terms: dict = field(default_factory=dict)

    @property
    def n_current(self) -> int:
        return self.parts[0]

    @property
    def current_logits(self):
        return self.logits[: self.parts[0]]

    def split(self, arr):
        return np.split(arr, np.cumsum(self.parts)[:-1])

    def gradients(self, model):
        return backward(model, self.cache, self.dlogits)


def _forward_parts(model, xs):
    parts = [len(x) for x in xs]
    x = np.concatenate([np.asarray(x, dtype=model.dtype) for x in xs if len(x)] or
                       [np.zeros((0, *model.input_shape), dtype=model.dtype)])
    logits, cache = forward(model, x)
    return logits, cache, parts


def _seen(task_range, seen_range):
    return seen_range if seen_range is not None else (0, task_range[1])


def er_loss(model, current, replay, task_range, seen_range=None) -> ReplayLoss:
    """Single-head CE on ``current`` plus full-head CE on ``replay``.

    ``current`` and ``replay`` are ``(inputs, labels)`` pairs; ``replay`` may
    be ``None`` or empty.  ``seen_range`` defaults to every class up to the end
    of ``task_range``.
    """
    cx, cy = current[:2]
    rx, ry = (replay[0], replay[1]) if replay is not None else (cx[:0], cy[:0])
    logits, cache, parts = _forward_parts(model, [cx, rx])
    zc, zr = np.split(logits, [parts[0]])
    l_cur, d_cur = single_head_cross_entropy(zc, cy, task_range)
    l_buf, d_buf = single_head_cross_entropy(zr, ry, _seen(task_range, seen_range))
    return ReplayLoss(l_cur + l_buf, logits, np.concatenate([d_cur, d_buf]), cache, parts,
                      {"current": l_cur, "replay_ce": l_buf})


def derpp_loss(model, current, batch_a, batch_b, coeff_mse, coeff_ce, task_range,
               seen_range=None) -> ReplayLoss:
    """DER++: current single-head CE, logit MSE on ``batch_a``, CE on ``batch_b``.

    ``batch_a`` is ``(inputs, labels, stored_logits)``; ``batch_b`` is
    ``(inputs, labels, ...)``.  Either may be ``None``.
    """
    if coeff_mse < 0 or coeff_ce < 0:
        raise ArgumentError("replay coefficients must be non-negative")
    cx, cy = current[:2]
    empty = (cx[:0], cy[:0], np.zeros((0, model.class_count)))
    ax, _, az = batch_a if batch_a is not None else empty
    bx, by = (batch_b[0], batch_b[1]) if batch_b is not None else empty[:2]
    logits, cache, parts = _forward_parts(model, [cx, ax, bx])
    zc, za, zb = np.split(logits, np.cumsum(parts)[:-1])
    l_cur, d_cur = single_head_cross_entropy(zc, cy, task_range)
    l_mse, d_mse = mse(za, az)
    l_ce, d_ce = single_head_cross_entropy(zb, by, _seen(task_range, seen_range))
    dt = logits.dtype.type
    dlogits = np.concatenate([d_cur, d_mse * dt(coeff_mse), d_ce * dt(coeff_ce)])
    loss = l_cur + coeff_mse * l_mse + coeff_ce * l_ce
    return ReplayLoss(loss, logits, dlogits, cache, parts,
                      {"current": l_cur, "replay_mse": l_mse, "replay_ce": l_ce})


def plain_loss(model, current, task_range, seen_range=None) -> ReplayLoss:
    """Naive fine-tuning: ordinary CE over every class seen so far, no replay."""
    seen = _seen(task_range, seen_range)
    return er_loss(model, current, None, seen, seen)
