"""Binary weight masks and CSR export.

A mask is a list of boolean arrays, one per maskable layer.  Positions are
addressed globally by ``(layer_index, flat_index)``; flattening the layers in
order gives a single "global index" whose ascending order is the tie-break
order used everywhere in this package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError


def round_half_up(x) -> int:
    # small epsilon absorbs representation error, e.g. (1 - 0.9) * 100
    return int(np.floor(x + 0.5 + 1e-9))


@dataclass
class WeightMask:
    layers: list
    target_sparsity: float = 0.0
    seed: int | None = None
    # weights added by an inter-task expansion and not yet shrunk back
    warmup: int = 0

    def copy(self) -> "WeightMask":
        return WeightMask([m.copy() for m in self.layers], self.target_sparsity, self.seed,
                          self.warmup)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def size(self) -> int:
        return int(sum(m.size for m in self.layers))

    @property
    def active_count(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.layers))

    @property
    def inactive_count(self) -> int:
        return self.size - self.active_count

    def layer_density(self):
        return [np.count_nonzero(m) / m.size for m in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self.layers])

    def _offsets(self):
        return np.concatenate([[0], np.cumsum([m.size for m in self.layers])])

    def unflatten(self, flat) -> list:
        off = self._offsets()
        return [flat[off[i]:off[i + 1]].reshape(m.shape) for i, m in enumerate(self.layers)]

    def split_ids(self, global_ids):
        """Map global indices to ``(layer_index, flat_index)`` pairs."""
        off = self._offsets()
        layer = np.searchsorted(off, global_ids, side="right") - 1
        return [(int(l), int(g - off[l])) for l, g in zip(layer, global_ids)]

    def apply(self, model):
        """Zero every masked-out weight of ``model`` in place."""
        layers = model.maskable_layers
        if len(layers) != len(self.layers):
            raise DimensionError("mask does not match model's maskable layers")
        for layer, m in zip(layers, self.layers):
            layer.weight[~m] = 0
        model.bump()

    def violations(self, model) -> int:
        """Number of masked-out weights that are not exactly zero."""
        return int(sum(np.count_nonzero(layer.weight[~m])
                       for layer, m in zip(model.maskable_layers, self.layers)))


def init_mask(layer_shapes, s, seed=None) -> WeightMask:
    """Uniform per-layer random mask keeping ``round((1-s) * N_layer)`` weights."""
    if not 0 <= s < 1:
        raise ArgumentError(f"sparsity must be in [0, 1), got {s}")
    rng = np.random.default_rng(seed)
    layers = []
    for shape in layer_shapes:
        n = int(np.prod(shape))
        keep = round_half_up((1 - s) * n)
        flat = np.zeros(n, dtype=bool)
        flat[rng.choice(n, size=keep, replace=False)] = True
        layers.append(flat.reshape(shape))
    return WeightMask(layers, float(s), seed)


def mask_for_model(model, s, seed=None) -> WeightMask:
    return init_mask(model.weight_shapes(), s, seed)


def sparsity(mask) -> float:
    layers = getattr(mask, "layers", mask)
    n = sum(m.size for m in layers)
    if n == 0:
        return 0.0
    return 1.0 - sum(np.count_nonzero(m) for m in layers) / n


def grow_random(mask: WeightMask, count: int, rng, model=None):
    """Activate ``count`` inactive positions chosen uniformly across all layers.

    Returns ``(new_mask, grown_global_ids)``.  Newly grown weights start at 0.
    """
    count = int(count)
    if count < 0 or count > mask.inactive_count:
        raise ArgumentError(f"cannot grow {count}; only {mask.inactive_count} inactive")
    flat = mask.flat()
    ids = np.sort(np.random.default_rng(rng).choice(np.flatnonzero(~flat), size=count, replace=False)) \
        if count else np.empty(0, dtype=np.int64)
    flat[ids] = True
    out = WeightMask(mask.unflatten(flat), mask.target_sparsity, mask.seed, mask.warmup)
    if model is not None:
        for layer_i, idx in out.split_ids(ids):
            model.maskable_layers[layer_i].weight.reshape(-1)[idx] = 0
        model.bump()
    return out, ids


def _flat_scores(mask, scores):
    layers = getattr(scores, "layers", scores)
    if len(layers) != len(mask.layers):
        raise DimensionError("scores do not match mask layers")
    return np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in layers])


def lowest_active(mask: WeightMask, scores, count: int) -> np.ndarray:
    """Global ids of the ``count`` active positions with the smallest score.

    Ties resolve toward the smaller global index.
    """
    flat = mask.flat()
    active = np.flatnonzero(flat)
    sc = _flat_scores(mask, scores)[active]
    order = np.argsort(sc, kind="stable")
    return np.sort(active[order[:count]])


def shrink_by_scores(mask: WeightMask, scores, count: int, model=None):
    """Deactivate the ``count`` lowest-scoring active weights.

    Returns ``(new_mask, removed_global_ids)``; removed weights are zeroed in
    ``model`` when one is given.
    """
    count = int(count)
    if count < 0 or count > mask.active_count:
        raise ArgumentError(f"cannot shrink {count}; only {mask.active_count} active")
    removed = lowest_active(mask, scores, count)
    flat = mask.flat()
    flat[removed] = False
    out = WeightMask(mask.unflatten(flat), mask.target_sparsity, mask.seed, mask.warmup)
    if model is not None:
        out.apply(model)
    return out, removed


# ---------------------------------------------------------------------------
# CSR
# ---------------------------------------------------------------------------


@dataclass
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    layer_name: str = ""

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def validate(self):
        rp = self.row_ptr
        if rp.size != self.n_rows + 1 or rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise ArgumentError("row_ptr must be nondecreasing with n_rows + 1 entries from 0")
        if rp[-1] != self.nnz or self.col_idx.size != self.nnz:
            raise ArgumentError("row_ptr[-1], col_idx and values disagree on nnz")
        for r in range(self.n_rows):
            cols = self.col_idx[rp[r]:rp[r + 1]]
            if np.any(np.diff(cols) <= 0) or (cols.size and (cols[0] < 0 or cols[-1] >= self.n_cols)):
                raise ArgumentError(f"row {r}: column indices must be strictly increasing and in range")

    def to_dense(self, dtype=None) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=dtype or self.values.dtype)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.values
        return out

    def storage_counts(self) -> dict:
        return {"values": self.nnz, "col_idx": int(self.col_idx.size), "row_ptr": int(self.row_ptr.size)}

    def to_dict(self) -> dict:
        return {
            "layer_name": self.layer_name,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "row_ptr": self.row_ptr.tolist(),
            "col_idx": self.col_idx.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d, dtype=np.float32) -> "CsrMatrix":
        m = cls(int(d["n_rows"]), int(d["n_cols"]), np.asarray(d["row_ptr"], dtype=np.int64),
                np.asarray(d["col_idx"], dtype=np.int64), np.asarray(d["values"], dtype=dtype),
                d.get("layer_name", ""))
        m.validate()
        return m


def to_csr(weights, mask, layer_name="") -> CsrMatrix:
    """CSR of the masked-in entries of a 2-D weight matrix, row-major."""
    w = np.asarray(weights)
    m = np.asarray(mask, dtype=bool)
    if w.ndim != 2 or m.shape != w.shape:
        raise DimensionError(f"to_csr needs congruent 2-D weights and mask, got {w.shape}, {m.shape}")
    rows, cols = np.nonzero(m)
    row_ptr = np.zeros(w.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=w.shape[0]), out=row_ptr[1:])
    return CsrMatrix(w.shape[0], w.shape[1], row_ptr, cols.astype(np.int64), w[rows, cols].copy(),
                     layer_name)


def export_csr(model, mask: WeightMask, path):
    """Write one CSR object per maskable layer as a JSON list.

    Conv kernels are stored as ``[out_channels, in_channels * k * k]``.
    Float values are written with ``repr`` precision, so float32 weights
    round-trip exactly.
    """
    out = []
    for i, layer, m in zip(model.maskable_indices, model.maskable_layers, mask.layers):
        w2 = layer.weight.reshape(layer.weight.shape[0], -1)
        csr = to_csr(w2, m.reshape(w2.shape), layer_name=f"layer{i}.{layer.kind}")
        d = csr.to_dict()
        d["shape"] = list(layer.weight.shape)
        out.append(d)
    with open(path, "w") as fh:
        json.dump(out, fh)
    return path


def import_csr(path, dtype=np.float32) -> list:
    """Read :func:`export_csr` output; returns ``[(name, shape, CsrMatrix)]``."""
    with open(path) as fh:
        items = json.load(fh)
    return [(d["layer_name"], tuple(d["shape"]), CsrMatrix.from_dict(d, dtype)) for d in items]
