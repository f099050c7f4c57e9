"""Hot kernels: numba ``@njit`` versions with a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``SPARSECL_DISABLE_NUMBA`` is unset or ``0``.  Both paths share the
same signatures, so callers never branch on the backend.  Convolution is the
exception: its numpy path reaches BLAS and is faster, so it is used in both
modes and the numba conv kernels serve only as a cross-check.  Results agree to
floating-point reassociation, not bitwise; determinism is guaranteed only
within one backend.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("SPARSECL_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def _windows(xp, k, stride):
    # [B, C, Ho, Wo, k, k] view over the padded input
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_np(xp, w, b, stride):
    k = w.shape[2]
    win = _windows(xp, k, stride)
    out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    out += b[None, :, None, None]
    return out.astype(xp.dtype, copy=False)


def conv2d_backward_np(xp, w, dout, stride):
    k = w.shape[2]
    win = _windows(xp, k, stride)
    dw = np.einsum("bchwij,bohw->ocij", win, dout, optimize=True).astype(w.dtype, copy=False)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[2], dout.shape[3]
    # scatter back one kernel tap at a time; k*k strided adds
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("bohw,oc->bchw", dout, w[:, :, i, j], optimize=True)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    return dxp, dw, db


def masked_sgd_np(w, g, mask, lr):
    lr = w.dtype.type(lr)
    w[...] = np.where(mask, w - lr * g, w.dtype.type(0))


def count_wrong_np(counts, ids, pred, labels):
    wrong = pred != labels
    np.add.at(counts, ids[wrong], 1)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    # Loop order keeps the innermost loop on contiguous output columns so
    # LLVM can vectorise it; the k*k taps sit outside.

    @njit(cache=True, fastmath=True)
    def conv2d_forward_nb(xp, w, b, stride):
        bsz, cin, _, _ = xp.shape
        cout, _, k, _ = w.shape
        ho = (xp.shape[2] - k) // stride + 1
        wo = (xp.shape[3] - k) // stride + 1
        out = np.empty((bsz, cout, ho, wo), dtype=xp.dtype)
        for n in range(bsz):
            for o in range(cout):
                out[n, o] = b[o]
                for c in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            wv = w[o, c, ki, kj]
                            for i in range(ho):
                                row = xp[n, c, i * stride + ki]
                                dst = out[n, o, i]
                                for j in range(wo):
                                    dst[j] += wv * row[j * stride + kj]
        return out

    @njit(cache=True, fastmath=True)
    def conv2d_backward_nb(xp, w, dout, stride):
        bsz, cin, _, _ = xp.shape
        cout, _, k, _ = w.shape
        ho = dout.shape[2]
        wo = dout.shape[3]
        dxp = np.zeros_like(xp)
        dw = np.zeros(w.shape, dtype=np.float64)
        db = np.zeros(cout, dtype=np.float64)
        for n in range(bsz):
            for o in range(cout):
                for i in range(ho):
                    for j in range(wo):
                        db[o] += dout[n, o, i, j]
                for c in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            wv = w[o, c, ki, kj]
                            acc = 0.0
                            for i in range(ho):
                                g = dout[n, o, i]
                                row = xp[n, c, i * stride + ki]
                                back = dxp[n, c, i * stride + ki]
                                for j in range(wo):
                                    acc += g[j] * row[j * stride + kj]
                                    back[j * stride + kj] += wv * g[j]
                            dw[o, c, ki, kj] += acc
        return dxp, dw.astype(w.dtype), db.astype(dout.dtype)

    @njit(cache=True)
    def _masked_sgd_flat(w, g, mask, lr):
        for i in range(w.size):
            if mask[i]:
                w[i] = w[i] - lr * g[i]
            else:
                w[i] = 0.0

    def masked_sgd_nb(w, g, mask, lr):
        lr = w.dtype.type(lr)
        _masked_sgd_flat(w.reshape(-1), g.reshape(-1), mask.reshape(-1), lr)

    @njit(cache=True)
    def count_wrong_nb(counts, ids, pred, labels):
        for i in range(ids.shape[0]):
            if pred[i] != labels[i]:
                counts[ids[i]] += 1


# Convolution always goes through the einsum path: it lands in BLAS GEMM,
# which beats the loop kernels (see benchmarks/bench_kernels.py).
conv2d_forward = conv2d_forward_np
conv2d_backward = conv2d_backward_np

if USE_NUMBA:
    masked_sgd = masked_sgd_nb
    count_wrong = count_wrong_nb
else:
    masked_sgd = masked_sgd_np
    count_wrong = count_wrong_np
