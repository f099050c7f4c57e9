"""Dense layers, forward/backward, and the masked SGD update.

Backpropagation is written out per layer kind; there is no autodiff graph.
Tensors are plain numpy arrays in the model's precision (float32 by default,
float64 for gradient checks).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ArgumentError, DimensionError, FormatError, NumericError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ArgumentError(f"unknown precision {precision!r}; use f32 or f64") from None
    return np.dtype(precision)


def precision_tag(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Layer:
    kind = "layer"
    weight = None
    bias = None

    @property
    def maskable(self) -> bool:
        return self.weight is not None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def hyperparams(self) -> dict:
        return {}


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, dtype=np.float32, rng=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((self.out_features, self.in_features), dtype=dtype)
        self.bias = np.zeros(self.out_features, dtype=dtype)
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng):
        # He-style uniform, fan-in scaled
        bound = np.sqrt(6.0 / self.in_features)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise DimensionError(
                f"linear expects input ({self.in_features},), got {tuple(in_shape)}"
            )
        return (self.out_features,)

    def hyperparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, x, dout, need_dx=True):
        dw = dout.T @ x
        db = dout.sum(axis=0)
        dx = dout @ self.weight if need_dx else None
        return dx, dw, db


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 dtype=np.float32, rng=None):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        k = self.kernel_size
        self.weight = np.zeros((self.out_channels, self.in_channels, k, k), dtype=dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype)
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng):
        fan_in = self.in_channels * self.kernel_size ** 2
        bound = np.sqrt(6.0 / fan_in)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"conv2d expects ({self.in_channels}, H, W) input, got {tuple(in_shape)}"
            )
        k, s, p = self.kernel_size, self.stride, self.padding
        h = (in_shape[1] + 2 * p - k) // s + 1
        w = (in_shape[2] + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise DimensionError(f"conv2d kernel {k} too large for input {tuple(in_shape)}")
        return (self.out_channels, h, w)

    def hyperparams(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return np.ascontiguousarray(x)
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        xp = self._pad(x)
        out = _accel.conv2d_forward(xp, self.weight, self.bias, self.stride)
        return out, xp

    def backward(self, xp, dout, need_dx=True):
        dxp, dw, db = _accel.conv2d_backward(xp, self.weight, np.ascontiguousarray(dout), self.stride)
        dx = None
        if need_dx:
            p = self.padding
            dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp
        return dx, dw, db


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out = np.maximum(x, 0)
        return out, x > 0

    def backward(self, active, dout, need_dx=True):
        return dout * active, None, None


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dout, need_dx=True):
        return dout.reshape(shape), None, None


LAYER_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, ReLU, Flatten)}


@dataclass
class GradientSet:
    """Per-layer weight and bias gradients; ``None`` for parameter-free layers."""

    weights: list
    biases: list

    def copy(self) -> "GradientSet":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return GradientSet([cp(w) for w in self.weights], [cp(b) for b in self.biases])

    def scaled(self, c) -> "GradientSet":
        sc = lambda a: None if a is None else a * a.dtype.type(c)  # noqa: E731
        return GradientSet([sc(w) for w in self.weights], [sc(b) for b in self.biases])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        add = lambda a, b: None if a is None else a + b  # noqa: E731
        return GradientSet(
            [add(a, b) for a, b in zip(self.weights, other.weights)],
            [add(a, b) for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class ForwardCache:
    model_id: int
    version: int
    layer_caches: list


class Model:
    """Ordered stack of layers with a class head of ``class_count`` outputs."""

    def __init__(self, layers, input_shape, class_count, task_class_ranges=None,
                 dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = int(class_count)
        self.task_class_ranges = [tuple(r) for r in (task_class_ranges or [])]
        self.dtype = np.dtype(dtype)
        self.version = 0
        shapes = self.layer_shapes()
        if shapes[-1] != (self.class_count,):
            raise DimensionError(
                f"last layer produces {shapes[-1]}, expected ({self.class_count},)"
            )
        self._check_ranges()

    def _check_ranges(self):
        seen = set()
        for lo, hi in self.task_class_ranges:
            if not 0 <= lo <= hi < self.class_count:
                raise ArgumentError(f"task class range ({lo}, {hi}) outside [0, {self.class_count})")
            span = set(range(lo, hi + 1))
            if span & seen:
                raise ArgumentError("task class ranges overlap")
            seen |= span

    def layer_shapes(self):
        """Per-example output shape of every layer, in order."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(tuple(shape))
        return shapes

    def layer_input_shapes(self):
        return [self.input_shape] + self.layer_shapes()[:-1]

    @property
    def maskable_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.maskable]

    @property
    def maskable_layers(self):
        return [self.layers[i] for i in self.maskable_indices]

    def weight_shapes(self):
        return [layer.weight.shape for layer in self.maskable_layers]

    def n_maskable(self) -> int:
        return int(sum(layer.weight.size for layer in self.maskable_layers))

    def bump(self):
        """Mark cached activations stale after any parameter mutation."""
        self.version += 1

    def copy(self) -> "Model":
        import copy

        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        for layer in m.layers:
            if layer.weight is not None:
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return m


def build_mlp(input_dim, class_count, hidden=(256,), dtype=np.float32, seed=0,
              input_shape=None) -> Model:
    rng = np.random.default_rng(seed)
    layers = [Flatten()]
    dims = [int(input_dim), *hidden]
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers += [Linear(d_in, d_out, dtype, rng), ReLU()]
    layers.append(Linear(dims[-1], class_count, dtype, rng))
    return Model(layers, input_shape or (int(input_dim),), class_count, dtype=dtype)


def build_cnn(input_shape, class_count, channels=8, kernel_size=3, padding=1,
              dtype=np.float32, seed=0) -> Model:
    rng = np.random.default_rng(seed)
    conv = Conv2d(input_shape[0], channels, kernel_size, 1, padding, dtype, rng)
    c, h, w = conv.output_shape(input_shape)
    layers = [conv, ReLU(), Flatten(), Linear(c * h * w, class_count, dtype, rng)]
    return Model(layers, input_shape, class_count, dtype=dtype)


def forward(model: Model, batch):
    """Run the model on ``batch``; returns ``(logits, cache)``."""
    x = np.asarray(batch, dtype=model.dtype)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"batch shape {x.shape[1:]} does not match model input {model.input_shape}"
        )
    caches = []
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in model.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite logits in forward pass")
    return x, ForwardCache(id(model), model.version, caches)


def backward(model: Model, cache: ForwardCache, dlogits) -> GradientSet:
    if cache is None or cache.model_id != id(model) or cache.version != model.version:
        raise StateError("forward cache is missing or stale; rerun forward()")
    d = np.asarray(dlogits, dtype=model.dtype)
    n = len(model.layers)
    dws, dbs = [None] * n, [None] * n
    first_param = model.maskable_indices[0] if model.maskable_indices else 0
    for i in range(n - 1, -1, -1):
        layer = model.layers[i]
        d, dws[i], dbs[i] = layer.backward(cache.layer_caches[i], d, need_dx=i > first_param)
        if d is None:
            break
    return GradientSet(dws, dbs)


def sgd_step(model: Model, grads: GradientSet, lr: float, weight_mask=None):
    """Plain SGD; masked-out weights are forced to exactly zero.

    ``weight_mask`` is a sequence of boolean arrays, one per maskable layer
    (a ``WeightMask`` works directly).  Biases are always updated.
    """
    if not lr > 0:
        raise ArgumentError(f"learning rate must be positive, got {lr}")
    masks = None if weight_mask is None else list(getattr(weight_mask, "layers", weight_mask))
    if masks is not None and len(masks) != len(model.maskable_indices):
        raise DimensionError(
            f"mask has {len(masks)} layers, model has {len(model.maskable_indices)} maskable"
        )
    lr_t = model.dtype.type(lr)
    for j, i in enumerate(model.maskable_indices):
        layer = model.layers[i]
        g = grads.weights[i]
        if g.shape != layer.weight.shape:
            raise DimensionError(f"gradient shape {g.shape} != weight shape {layer.weight.shape}")
        if masks is None:
            layer.weight -= lr_t * g
        else:
            m = masks[j]
            if m.shape != layer.weight.shape:
                raise DimensionError(f"mask shape {m.shape} != weight shape {layer.weight.shape}")
            _accel.masked_sgd(layer.weight, g.astype(model.dtype, copy=False), m, lr)
        layer.bias -= lr_t * grads.biases[i]
    model.bump()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "sparsecl-checkpoint/1"


def save_checkpoint(model: Model, path, extra=None):
    """Write an ``.npz`` holding the weights plus a JSON header describing them."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "precision": precision_tag(model.dtype),
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "task_class_ranges": [list(r) for r in model.task_class_ranges],
        "layers": [{"kind": layer.kind, **layer.hyperparams()} for layer in model.layers],
        "extra": extra or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, layer in enumerate(model.layers):
        if layer.weight is not None:
            arrays[f"layer{i}.weight"] = layer.weight
            arrays[f"layer{i}.bias"] = layer.bias
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extra)``."""
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(bytes(data["header"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unexpected checkpoint format {header.get('format')!r}")
    dtype = resolve_dtype(header["precision"])
    layers = []
    for i, spec in enumerate(header["layers"]):
        spec = dict(spec)
        cls = LAYER_KINDS[spec.pop("kind")]
        layer = cls(**spec, dtype=dtype) if cls in (Linear, Conv2d) else cls()
        if layer.weight is not None:
            layer.weight[...] = data[f"layer{i}.weight"]
            layer.bias[...] = data[f"layer{i}.bias"]
        layers.append(layer)
    model = Model(layers, header["input_shape"], header["class_count"],
                  header["task_class_ranges"], dtype=dtype)
    return model, header.get("extra", {})
