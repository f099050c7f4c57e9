"""Task-aware dynamic masking: intra-task shrink-and-expand and inter-task
expand-and-shrink of the weight mask, ranked by continual weight importance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, StateError
from .importance import compute_cwi  # noqa: F401  (re-exported)
from .masks import WeightMask, grow_random, round_half_up, shrink_by_scores


@dataclass(frozen=True)
class TdmSchedule:
    s: float
    delta_k: int = 5
    p_intra: float = 0.005
    p_inter: float = 0.01
    alpha: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        if self.delta_k < 1:
            raise ArgumentError("delta_k must be >= 1")
        if self.p_intra < 0 or self.p_inter < 0:
            raise ArgumentError("adjustment ratios must be non-negative")
        if self.p_inter > self.s:
            raise ArgumentError(f"p_inter ({self.p_inter}) cannot exceed s ({self.s})")

    def intra_count(self, n) -> int:
        return round_half_up(self.p_intra * n)

    def inter_count(self, n) -> int:
        return round_half_up(self.p_inter * n)


@dataclass
class TdmEvent:
    kind: str
    mask: WeightMask
    removed: np.ndarray
    grown: np.ndarray

    @property
    def removed_count(self) -> int:
        return int(self.removed.size)

    @property
    def grown_count(self) -> int:
        return int(self.grown.size)


_EMPTY = np.empty(0, dtype=np.int64)


def intra_adjust(mask: WeightMask, scores, schedule: TdmSchedule, rng, model=None):
    """Drop the ``p_intra * N`` least important weights, then regrow as many at random.

    Returns ``(mask, removed_ids, grown_ids)``.  Regrowth may pick positions
    that were just removed.
    """
    k = schedule.intra_count(mask.size)
    if k > mask.active_count:
        raise ArgumentError(f"intra adjustment of {k} exceeds {mask.active_count} active weights")
    if k == 0:
        return mask, _EMPTY, _EMPTY
    mask, removed = shrink_by_scores(mask, scores, k, model)
    mask, grown = grow_random(mask, k, rng, model)
    return mask, removed, grown


def inter_expand(mask: WeightMask, schedule: TdmSchedule, rng, model=None):
    """Grow ``p_inter * N`` random unused weights for the warm-up window."""
    k = schedule.inter_count(mask.size)
    if k == 0:
        return mask, _EMPTY
    mask, grown = grow_random(mask, k, rng, model)
    mask.warmup += k
    return mask, grown


def inter_shrink(mask: WeightMask, scores, schedule: TdmSchedule, model=None):
    """Remove the ``p_inter * N`` least important weights, ending the warm-up."""
    k = schedule.inter_count(mask.size)
    if k == 0:
        return mask, _EMPTY
    if mask.warmup < k:
        raise StateError("inter_shrink called outside a warm-up window (no prior inter_expand)")
    mask, removed = shrink_by_scores(mask, scores, k, model)
    mask.warmup -= k
    return mask, removed


def tdm_event_kind(task_idx: int, epoch: int, schedule: TdmSchedule) -> str:
    """Which adjustment fires at the start of ``epoch`` (1-based) of task ``task_idx`` (1-based)."""
    if epoch < 1:
        raise ArgumentError("epochs are 1-based")
    kinds = []
    if task_idx > 1 and epoch == 1:
        kinds.append("inter_expand")
    if task_idx > 1 and epoch == schedule.delta_k:
        kinds.append("inter_shrink")
    elif epoch % schedule.delta_k == 0:
        kinds.append("intra")
    return "+".join(kinds) if kinds else "none"


def tdm_step(task_idx, epoch, mask: WeightMask, schedule: TdmSchedule, rng, score_fn,
             model=None) -> TdmEvent:
    """Apply whatever adjustment the calendar prescribes for this epoch.

    ``score_fn()`` is called lazily (at most once) to obtain importance
    scores, so epochs without a shrink pay nothing.
    """
    kind = tdm_event_kind(task_idx, epoch, schedule)
    removed, grown = [_EMPTY], [_EMPTY]
    if "inter_expand" in kind:
        mask, g = inter_expand(mask, schedule, rng, model)
        grown.append(g)
    if "inter_shrink" in kind:
        mask, r = inter_shrink(mask, score_fn(), schedule, model)
        removed.append(r)
    if "intra" in kind:
        scores = score_fn() if schedule.intra_count(mask.size) else None
        mask, r, g = intra_adjust(mask, scores, schedule, rng, model)
        removed.append(r)
        grown.append(g)
    return TdmEvent(kind, mask, np.concatenate(removed), np.concatenate(grown))
