"""Training-cost accounting (FLOPs, memory footprint) and CL accuracy.

FLOPs are analytic: every multiply and add in linear/conv layers, scaled by
the fraction of active weights.  Activation functions, flatten, and the loss
are not counted.  A backward pass costs two forward passes: one for the
activation gradients, one for the weight gradients.  Only the
weight-gradient half shrinks under a gradient mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .masks import round_half_up
from .nn import Conv2d, Linear, Model, forward


def dense_layer_flops(layer, input_shape=None) -> int:
    """Per-example FLOPs of a fully dense layer (0 for parameter-free layers)."""
    if isinstance(layer, Linear):
        return 2 * layer.in_features * layer.out_features
    if isinstance(layer, Conv2d):
        if input_shape is None:
            raise ValueError("conv2d FLOPs need the layer input shape")
        _, ho, wo = layer.output_shape(input_shape)
        return 2 * layer.kernel_size ** 2 * layer.in_channels * layer.out_channels * ho * wo
    return 0


def layer_forward_flops(layer, s_l: float, batch: int, input_shape=None) -> int:
    return round_half_up(dense_layer_flops(layer, input_shape) * (1.0 - s_l)) * int(batch)


@dataclass
class FlopsLedger:
    forward: int = 0
    backward: int = 0
    per_layer: dict = field(default_factory=dict)
    batches: int = 0
    examples: int = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def to_dict(self):
        return {"forward": self.forward, "backward": self.backward, "total": self.total,
                "batches": self.batches, "examples": self.examples,
                "per_layer": {str(k): v for k, v in self.per_layer.items()}}


def _density(m):
    return np.count_nonzero(m) / m.size


def accumulate_training_flops(ledger: FlopsLedger, model: Model, weight_mask, batch: int,
                              grad_mask=None):
    """Charge one training iteration over ``batch`` examples to ``ledger``.

    ``weight_mask`` may be ``None`` (dense).  When ``grad_mask`` is given the
    weight-gradient pass of each layer is charged at the gradient mask's
    density instead of the weight mask's.
    """
    if batch <= 0:
        return ledger
    in_shapes = model.layer_input_shapes()
    wm = None if weight_mask is None else list(getattr(weight_mask, "layers", weight_mask))
    gm = None if grad_mask is None else list(getattr(grad_mask, "layers", grad_mask))
    for j, i in enumerate(model.maskable_indices):
        layer = model.layers[i]
        s_w = 0.0 if wm is None else 1.0 - _density(wm[j])
        s_g = s_w if gm is None else 1.0 - _density(gm[j])
        fwd = layer_forward_flops(layer, s_w, batch, in_shapes[i])
        bwd = fwd + layer_forward_flops(layer, s_g, batch, in_shapes[i])
        ledger.forward += fwd
        ledger.backward += bwd
        f0, b0 = ledger.per_layer.get(i, (0, 0))
        ledger.per_layer[i] = (f0 + fwd, b0 + bwd)
    ledger.batches += 1
    ledger.examples += int(batch)
    return ledger


def activation_count(model: Model) -> int:
    """Per-example output elements of the weighted layers (sum of O*H*W)."""
    shapes = model.layer_shapes()
    return int(sum(np.prod(shapes[i]) for i in model.maskable_indices))


@dataclass
class MemoryReport:
    batch_size: int
    activation_count: int
    n_weights: int
    s: float
    q: float
    bytes_per_number: int = 4

    @property
    def footprint_bytes(self) -> float:
        return memory_footprint(self.batch_size, self.activation_count, self.n_weights,
                                self.s, self.q, self.bytes_per_number)

    def to_dict(self):
        return {**asdict(self), "footprint_bytes": self.footprint_bytes}


def memory_footprint(batch_size, activations, n_weights, s, q, bytes_per_number=4) -> float:
    """``(2*B*A + (1-s)*N + (1-(s+q))*N) * b_w``.

    The activation term counts stored activations plus their gradients; the
    second and third terms are sparse weights and sparse gradients.
    """
    return (2 * batch_size * activations + (1 - s) * n_weights
            + (1 - (s + q)) * n_weights) * bytes_per_number


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

CLASS_IL = "class-il"
TASK_IL = "task-il"


@dataclass
class AccuracyTable:
    mode: str
    per_task: list
    average: float

    def to_dict(self):
        return asdict(self)


def predict(model, x, class_range, batch_size=512) -> np.ndarray:
    lo, hi = class_range
    out = []
    for start in range(0, len(x), batch_size):
        logits, _ = forward(model, x[start:start + batch_size])
        out.append(np.argmax(logits[:, lo:hi + 1], axis=1) + lo)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate(model, tasks, mode=CLASS_IL, seen_tasks=None) -> AccuracyTable:
    """Accuracy (percent) on the test split of each task.

    ``tasks`` is a sequence of objects with ``test_x``, ``test_y`` and
    ``class_range``.  Class-IL takes the argmax over every class seen in the
    first ``seen_tasks`` tasks; Task-IL restricts it to the task's own range.
    """
    mode = mode.lower()
    if mode not in (CLASS_IL, TASK_IL):
        raise ValueError(f"mode must be {CLASS_IL!r} or {TASK_IL!r}")
    tasks = list(tasks)[: seen_tasks or len(tasks)]
    seen_hi = max(t.class_range[1] for t in tasks)
    accs = []
    for t in tasks:
        rng_ = t.class_range if mode == TASK_IL else (0, seen_hi)
        pred = predict(model, t.test_x, rng_)
        accs.append(float(100.0 * np.mean(pred == t.test_y)) if len(pred) else 0.0)
    return AccuracyTable(mode, accs, float(np.mean(accs)))
