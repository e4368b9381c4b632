"""Hot numeric kernels: 2-D convolution and brute-force Hausdorff.

Each kernel has a numba implementation and a pure-numpy implementation with
identical signatures.  The numba path is used when numba imports cleanly and
``SPCOT_DISABLE_NUMBA`` is unset (or ``0``); ``set_backend`` switches at
runtime, which the tests and the benchmark use to compare both paths.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_disabled = os.environ.get("SPCOT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
_backend = "numba" if (HAVE_NUMBA and not _disabled) else "numpy"


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col_np(x, k):
    n, c, h, w = x.shape
    xp = _pad(x, (k - 1) // 2)
    cols = np.empty((c, k, k, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _flip_transpose(w):
    # kernel of the adjoint convolution: swap in/out channels, rotate 180 degrees
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _conv_fwd_np(x, w, b):
    n, _, h, wd = x.shape
    cols = _im2col_np(x, w.shape[-1])
    out = (w.reshape(w.shape[0], -1) @ cols).reshape(w.shape[0], n, h, wd)
    out = out.transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv_bwd_np(x, w, g, need_input_grad):
    cout = w.shape[0]
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    gw = (g2 @ _im2col_np(x, w.shape[-1]).T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gx = None
    if need_input_grad:
        gx = _conv_fwd_np(g, _flip_transpose(w), np.zeros(x.shape[1]))
    return gx, gw, gb


def _sqdist_max_min_np(a, b):
    # a, b: [n, 2] integer coordinates; returns max_i min_j |a_i - b_j|^2
    best = 0
    for start in range(0, len(a), 512):
        chunk = a[start:start + 512]
        d = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, int(d.min(axis=1).max()))
    return best


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    # Columns are built one sample at a time so the buffer stays in cache;
    # contractions go to BLAS through np.dot.  The input gradient is the
    # forward convolution of g with the flipped, channel-swapped kernel.

    @njit(cache=True, nogil=True)
    def _im2col_nb(x, s, k, cols):
        _, c, h, wd = x.shape
        p = (k - 1) // 2
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    r = (ci * k + i) * k + j
                    sh = j - p
                    for y in range(h):
                        yy = y + i - p
                        base = y * wd
                        if yy < 0 or yy >= h:
                            for xx in range(wd):
                                cols[r, base + xx] = 0.0
                        else:
                            for xx in range(wd):
                                xs = xx + sh
                                cols[r, base + xx] = x[s, ci, yy, xs] if 0 <= xs < wd else 0.0
        return cols

    @njit(cache=True, nogil=True)
    def _conv_fwd_nb(x, w, b):
        n, c, h, wd = x.shape
        cout, _, k, _ = w.shape
        hw = h * wd
        w2 = np.ascontiguousarray(w.reshape(cout, -1))
        cols = np.empty((c * k * k, hw))
        out = np.empty((n, cout, h, wd))
        for s in range(n):
            if k == 1:
                res = np.dot(w2, np.ascontiguousarray(x[s].reshape(c, hw)))
            else:
                _im2col_nb(x, s, k, cols)
                res = np.dot(w2, cols)
            for o in range(cout):
                bo = b[o]
                for y in range(h):
                    for xx in range(wd):
                        out[s, o, y, xx] = res[o, y * wd + xx] + bo
        return out

    @njit(cache=True, nogil=True)
    def _conv_bwd_nb(x, w, g, need_input_grad):
        n, c, h, wd = x.shape
        cout, _, k, _ = w.shape
        hw = h * wd
        cols = np.empty((c * k * k, hw))
        g2t = np.empty((hw, cout))
        gwt = np.zeros((c * k * k, cout))
        gb = np.zeros(cout)
        for s in range(n):
            for o in range(cout):
                acc = 0.0
                for y in range(h):
                    for xx in range(wd):
                        v = g[s, o, y, xx]
                        g2t[y * wd + xx, o] = v
                        acc += v
                gb[o] += acc
            if k == 1:
                gwt += np.dot(np.ascontiguousarray(x[s].reshape(c, hw)), g2t)
            else:
                _im2col_nb(x, s, k, cols)
                gwt += np.dot(cols, g2t)
        gw = np.ascontiguousarray(gwt.T).reshape(w.shape)
        if not need_input_grad:
            return np.zeros((0, 0, 0, 0)), gw, gb
        wt = np.empty((c, cout, k, k))
        for o in range(cout):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        wt[ci, o, k - 1 - i, k - 1 - j] = w[o, ci, i, j]
        return _conv_fwd_nb(g, wt, np.zeros(c)), gw, gb

    @njit(cache=True, nogil=True)
    def _sqdist_max_min_nb(a, b):
        best = 0
        for i in range(a.shape[0]):
            m = -1
            for j in range(b.shape[0]):
                dy = a[i, 0] - b[j, 0]
                dx = a[i, 1] - b[j, 1]
                d = dy * dy + dx * dx
                if m < 0 or d < m:
                    m = d
                    if m == 0:
                        break
            if m > best:
                best = m
        return best


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv2d_forward(x, w, b):
    """Zero-padded 'same' cross-correlation. x [N,Cin,H,W], w [Cout,Cin,k,k]."""
    if _backend == "numba":
        return _conv_fwd_nb(x, w, b)
    return _conv_fwd_np(x, w, b)


def conv2d_backward(x, w, g, need_input_grad=True):
    """Gradients (input or None, kernel, bias) of conv2d_forward for upstream g."""
    if _backend == "numba":
        gx, gw, gb = _conv_bwd_nb(x, w, g, need_input_grad)
        return (gx if need_input_grad else None), gw, gb
    return _conv_bwd_np(x, w, g, need_input_grad)


def directed_sq_hausdorff(a, b):
    """max over rows of a of the squared distance to the nearest row of b."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if _backend == "numba":
        return int(_sqdist_max_min_nb(a, b))
    return _sqdist_max_min_np(a, b)
