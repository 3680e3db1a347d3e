"""Hot-kernel dispatch: compiled extension when built, chunked numpy otherwise.

The two routes agree on semantics (sign(0) = 0, tied pairs count as neither)
but may differ in the last float ulp; benchmarks/bench_speedups.py compares
both for speed and agreement.
"""

from __future__ import annotations

import numpy as np

try:
    from . import _ckernels

    HAVE_COMPILED = True
except ImportError:  # pure-Python install or in-place source tree
    _ckernels = None
    HAVE_COMPILED = False

_CHUNK = 512


def kendall_counts_py(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Fallback pair counting via chunked sign-outer-products."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_counts: length mismatch")
    n = a.size
    conc = disc = 0
    for i0 in range(0, n, _CHUNK):
        i1 = min(i0 + _CHUNK, n)
        sa = np.sign(a[i0:i1, None] - a[None, :])
        sb = np.sign(b[i0:i1, None] - b[None, :])
        # keep strictly-upper pairs: global column index > global row index
        upper = np.arange(n)[None, :] > np.arange(i0, i1)[:, None]
        prod = sa * sb
        conc += int(np.count_nonzero((prod > 0) & upper))
        disc += int(np.count_nonzero((prod < 0) & upper))
    return conc, disc


def pairwise_l1_py(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("pairwise_l1: dimension mismatch")
    out = np.empty((x.shape[0], y.shape[0]), dtype=np.float64)
    for i0 in range(0, x.shape[0], _CHUNK):
        i1 = min(i0 + _CHUNK, x.shape[0])
        out[i0:i1] = np.abs(x[i0:i1, None, :] - y[None, :, :]).sum(axis=2)
    return out


def pairwise_l1_backward_py(
    x: np.ndarray, y: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (x.shape[0], y.shape[0]) or x.shape[1] != y.shape[1]:
        raise ValueError("pairwise_l1_backward: shape mismatch")
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    for i0 in range(0, x.shape[0], _CHUNK):
        i1 = min(i0 + _CHUNK, x.shape[0])
        s = np.sign(x[i0:i1, None, :] - y[None, :, :]) * g[i0:i1, :, None]
        gx[i0:i1] = s.sum(axis=1)
        gy -= s.sum(axis=0)
    return gx, gy


def kendall_counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """(concordant, discordant) pair counts over all index pairs i < j."""
    if HAVE_COMPILED:
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        return _ckernels.kendall_counts(a, b)
    return kendall_counts_py(a, b)


def pairwise_l1(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """L1 distance matrix between the rows of x (n, d) and y (m, d)."""
    if HAVE_COMPILED and x.dtype == np.float64 and y.dtype == np.float64:
        return _ckernels.pairwise_l1(
            np.ascontiguousarray(x), np.ascontiguousarray(y)
        )
    return pairwise_l1_py(x, y)


def pairwise_l1_backward(
    x: np.ndarray, y: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(g * pairwise_l1(x, y)) w.r.t. x and y."""
    if HAVE_COMPILED and x.dtype == np.float64 and y.dtype == np.float64:
        return _ckernels.pairwise_l1_backward(
            np.ascontiguousarray(x),
            np.ascontiguousarray(y),
            np.ascontiguousarray(g, dtype=np.float64),
        )
    return pairwise_l1_backward_py(x, y, g)
