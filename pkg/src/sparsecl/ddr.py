"""Dynamic data removal: staged pruning of the least-misclassified examples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ArgumentError


class MisclassCounter:
    """Per-example misclassification counts for the current stage.

    Backed by a dense array indexed by example id, so ids must be
    non-negative integers below ``n_ids``.
    """

    def __init__(self, n_ids: int):
        self.counts = np.zeros(int(n_ids), dtype=np.int64)

    def __getitem__(self, example_id):
        return self.counts[example_id]

    def reset(self):
        self.counts[:] = 0


def record_misclassifications(counter: MisclassCounter, predictions, labels, example_ids):
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    ids = np.asarray(example_ids, dtype=np.int64)
    if not pred.shape == lab.shape == ids.shape:
        raise ArgumentError("predictions, labels and example_ids must be aligned")
    _accel.count_wrong(counter.counts, ids, pred, lab)


@dataclass(frozen=True)
class RemovalPolicy:
    rho: float
    cutoff: int
    n_t: int

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ArgumentError(f"rho must be in [0, 1], got {self.rho}")
        if self.cutoff < 1:
            raise ArgumentError("cutoff must be >= 1")

    def cumulative(self, stage: int) -> int:
        """Examples removed by the end of ``stage`` (cumulative floor)."""
        i = min(max(int(stage), 0), self.cutoff)
        # integer arithmetic where possible to dodge float drift in floor
        return int(np.floor(self.n_t * self.rho * i / self.cutoff + 1e-9))

    @property
    def quotas(self) -> list:
        return [removal_quota(self, i) for i in range(1, self.cutoff + 1)]


def removal_quota(policy: RemovalPolicy, stage: int) -> int:
    if stage < 1:
        raise ArgumentError("stages are 1-based")
    return policy.cumulative(stage) - policy.cumulative(stage - 1)


def remove_easiest(active_ids, counter: MisclassCounter, quota: int):
    """Drop the ``quota`` active examples with the fewest misclassifications.

    Ties go to the smaller example id.  Returns ``(remaining_ids, removed_ids)``,
    both sorted ascending.
    """
    active = np.sort(np.asarray(active_ids, dtype=np.int64))
    quota = int(quota)
    if quota < 0 or quota > active.size:
        raise ArgumentError(f"quota {quota} exceeds active set of {active.size}")
    order = np.argsort(counter.counts[active], kind="stable")
    removed = np.sort(active[order[:quota]])
    remaining = np.sort(active[order[quota:]])
    return remaining, removed


def one_shot_remove(active_ids, counter: MisclassCounter, rho: float, n_t: int):
    """Remove ``floor(n_t * rho)`` easiest examples in a single event."""
    quota = int(np.floor(n_t * rho + 1e-9))
    return remove_easiest(active_ids, counter, quota)
