"""Dynamic gradient masking: a gradient mask nested inside the weight mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .importance import compute_cgi  # noqa: F401  (re-exported)
from .masks import WeightMask, _flat_scores, round_half_up
from .nn import GradientSet


@dataclass
class GradientMask:
    layers: list
    q: float

    def __iter__(self):
        return iter(self.layers)

    @property
    def size(self) -> int:
        return int(sum(m.size for m in self.layers))

    @property
    def active_count(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.layers))

    def nested_in(self, weight_mask) -> bool:
        return all(not np.any(g & ~w) for g, w in zip(self.layers, weight_mask.layers))


def build_gradient_mask(weight_mask: WeightMask, cgi, q: float) -> GradientMask:
    """Keep the highest-CGI active weights, dropping ``round(q * N)`` of them.

    With the weight mask at sparsity ``s`` this leaves ``(1 - (s + q)) * N``
    updatable positions.  Among equal scores the lower global indices are
    kept, so higher indices are dropped first.
    """
    s = 1.0 - weight_mask.active_count / weight_mask.size
    if q < 0 or s + q >= 1:
        raise ArgumentError(f"need 0 <= q and s + q < 1, got s={s:.4f}, q={q}")
    drop = min(round_half_up(q * weight_mask.size), weight_mask.active_count)
    flat = weight_mask.flat()
    active = np.flatnonzero(flat)
    sc = _flat_scores(weight_mask, cgi)[active]
    order = np.lexsort((-active, sc))
    flat[active[order[:drop]]] = False
    return GradientMask(weight_mask.unflatten(flat), float(q))


def apply_gradient_mask(grads: GradientSet, g_mask, maskable_indices) -> GradientSet:
    """Zero weight gradients outside ``g_mask``; bias gradients pass through."""
    layers = list(getattr(g_mask, "layers", g_mask))
    if len(layers) != len(maskable_indices):
        raise DimensionError("gradient mask does not match the maskable layers")
    out = GradientSet(list(grads.weights), list(grads.biases))
    for m, i in zip(layers, maskable_indices):
        g = grads.weights[i]
        if g.shape != m.shape:
            raise DimensionError(f"gradient {g.shape} vs mask {m.shape}")
        out.weights[i] = np.where(m, g, g.dtype.type(0))
    return out
