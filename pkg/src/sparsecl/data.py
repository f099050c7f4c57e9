"""Dataset ingestion (IDX files, synthetic blobs) and split-task streams."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


@dataclass
class Task:
    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_range: tuple

    @property
    def n_train(self) -> int:
        return len(self.train_y)


@dataclass
class TaskStream:
    tasks: list
    class_count: int
    input_shape: tuple
    description: dict

    @property
    def T(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    @property
    def class_ranges(self):
        return [t.class_range for t in self.tasks]

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tasks:
            for a in (t.train_x, t.train_y, t.train_ids, t.test_x, t.test_y):
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf, magic, n_dims, path):
    need = 4 + 4 * n_dims
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes, need {need})",
                          offset=len(buf), path=str(path))
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}",
                          offset=0, path=str(path))
    return struct.unpack(f">{n_dims}I", buf[4:need]), need


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Images come back as float32 ``[n, 1, H, W]`` scaled to ``[0, 1]``.
    """
    ibuf = _read_bytes(images_path)
    lbuf = _read_bytes(labels_path)
    (n, h, w), ioff = _header(ibuf, IDX_IMAGES_MAGIC, 3, images_path)
    (m,), loff = _header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise FormatError(f"image count {n} != label count {m}", offset=4,
                          path=str(labels_path))
    if len(ibuf) < ioff + n * h * w:
        raise FormatError(f"{images_path}: truncated pixel data", offset=len(ibuf),
                          path=str(images_path))
    if len(lbuf) < loff + m:
        raise FormatError(f"{labels_path}: truncated label data", offset=len(lbuf),
                          path=str(labels_path))
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * h * w, offset=ioff)
    x = (pixels.reshape(n, 1, h, w).astype(np.float32) / np.float32(255.0))
    y = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=loff).astype(np.int64)
    return Dataset(x, y)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``[n, H, W]`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, name):
    for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = Path(directory) / cand
        if p.exists():
            return p
    raise FileNotFoundError(f"{name}[.gz] not found in {directory}")


def load_idx_dir(directory):
    """Load the standard MNIST-style train/test file quartet from a directory."""
    return tuple(load_idx(_find(directory, img), _find(directory, lab))
                 for img, lab in _MNIST_NAMES.values())


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------


def _split_train_test(x, y, rng, train_frac=0.8):
    tr, te = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(train_frac * idx.size))
        tr.append(idx[:k])
        te.append(idx[k:])
    return np.concatenate(tr), np.concatenate(te)


def build_split_tasks(dataset: Dataset, T: int, classes_per_task: int, seed=0,
                      test: Dataset | None = None, description=None) -> TaskStream:
    """Task ``t`` (0-based) gets classes ``[t*cpt, (t+1)*cpt)``.

    Without a separate ``test`` set, each class is split 80/20.  Example ids
    are unique across the whole stream.
    """
    total = dataset.n_classes
    if T < 1 or classes_per_task < 1 or T * classes_per_task > total:
        raise ArgumentError(
            f"{T} tasks x {classes_per_task} classes needs more than the {total} available"
        )
    rng = np.random.default_rng(seed)
    if test is None:
        tr, te = _split_train_test(dataset.x, dataset.y, rng)
        test = Dataset(dataset.x[te], dataset.y[te])
        dataset = Dataset(dataset.x[tr], dataset.y[tr])
    tasks = []
    next_id = 0
    for t in range(T):
        lo, hi = t * classes_per_task, (t + 1) * classes_per_task - 1
        sel = np.flatnonzero((dataset.y >= lo) & (dataset.y <= hi))
        sel = sel[rng.permutation(sel.size)]
        tsel = np.flatnonzero((test.y >= lo) & (test.y <= hi))
        ids = np.arange(next_id, next_id + sel.size, dtype=np.int64)
        next_id += sel.size
        tasks.append(Task(dataset.x[sel], dataset.y[sel], ids, test.x[tsel], test.y[tsel], (lo, hi)))
    desc = {"kind": "split", "T": T, "classes_per_task": classes_per_task, "seed": seed}
    desc.update(description or {})
    return TaskStream(tasks, T * classes_per_task, tuple(dataset.x.shape[1:]), desc)


def build_synthetic_tasks(T=5, classes_per_task=2, dim=784, n_per_class=250, separation=5.0,
                          seed=0, noise=1.0) -> TaskStream:
    """Gaussian blobs, one per class, centred on the vertices of a scaled simplex.

    Class ``c`` has mean ``separation * e_c`` and isotropic noise; 80% of each
    class trains, 20% tests.
    """
    if separation < 0:
        raise ArgumentError("separation must be non-negative")
    n_classes = T * classes_per_task
    if dim < n_classes:
        raise ArgumentError(f"dim ({dim}) must be at least the class count ({n_classes})")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(n_classes):
        mean = np.zeros(dim)
        mean[c] = separation
        xs.append(mean + noise * rng.standard_normal((n_per_class, dim)))
        ys.append(np.full(n_per_class, c))
    ds = Dataset(np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64))
    desc = {"kind": "synthetic", "T": T, "classes_per_task": classes_per_task, "dim": dim,
            "n_per_class": n_per_class, "separation": separation, "noise": noise, "seed": seed}
    return build_split_tasks(ds, T, classes_per_task, seed=seed, description=desc)
