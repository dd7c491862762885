"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` loop version and a pure
numpy/scipy version. The active backend is picked once at import from the
``Y2NET_BACKEND`` environment variable (``numba`` or ``numpy``); when numba
is missing the numpy path is used regardless. Both paths are always
importable so tests and the benchmark can compare them directly.

Conventions for the feature-axis convolution kernels (all arrays C-contiguous):

    xpad : (B, Mp, C_in)      input already zero-padded along the feature axis
    w    : (N, C_in, C_out)   taps x input channels x output channels
    out  : (B, M_out, C_out)  out[b, i, o] = sum_{t,c} xpad[b, i*s + t, c] w[t, c, o]
"""

from __future__ import annotations

import os
import warnings

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.signal import lfilter

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - declared dependency, guarded for odd platforms
    HAVE_NUMBA = False

_requested = os.environ.get("Y2NET_BACKEND", "numpy").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"Y2NET_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = _requested if (HAVE_NUMBA or _requested == "numpy") else "numpy"
if BACKEND != _requested:
    warnings.warn("Y2NET_BACKEND=numba requested but numba is not importable; using numpy", RuntimeWarning, stacklevel=2)


# ---------------------------------------------------------------------------
# numpy path


def _im2col(xpad, n, stride, m_out):
    """(B*M_out, N*C_in) patch matrix; each row is one contiguous run of xpad."""
    xpad = np.ascontiguousarray(xpad)
    b, _, c = xpad.shape
    sb, _, sc = xpad.strides
    cols = as_strided(xpad, (b, m_out, n * c), (sb, stride * c * sc, sc), writeable=False)
    # overlapping rows are not a BLAS layout: materialise
    return np.ascontiguousarray(cols.reshape(b * m_out, n * c))


def conv_fwd_np(xpad, w, stride, m_out):
    n, c_in, c_out = w.shape
    cols = _im2col(xpad, n, stride, m_out)
    return (cols @ w.reshape(n * c_in, c_out)).reshape(xpad.shape[0], m_out, c_out)


def conv_wgrad_np(xpad, gout, stride, n):
    b, m_out, c_out = gout.shape
    cols = _im2col(xpad, n, stride, m_out)
    return (cols.T @ gout.reshape(b * m_out, c_out)).reshape(n, xpad.shape[2], c_out)


def conv_igrad_np(gout, w, stride, mp):
    """Padded-input gradient, computed as a stride-1 conv of the zero-stuffed
    output gradient with the flipped, channel-transposed kernel."""
    b, m_out, c_out = gout.shape
    n, c_in, _ = w.shape
    span = (m_out - 1) * stride + 1
    stuffed = np.zeros((b, span + 2 * (n - 1), c_out), dtype=gout.dtype)
    stuffed[:, n - 1 : n - 1 + span : stride] = gout
    wf = np.ascontiguousarray(w[::-1].transpose(0, 2, 1))
    gx = np.zeros((b, mp, c_in), dtype=np.result_type(gout, w))
    gx[:, : span + n - 1] = conv_fwd_np(stuffed, wf, 1, span + n - 1)
    return gx


def dc_block_np(x, r):
    return lfilter([1.0, -1.0], [1.0, -r], x)


def one_pole_np(x, a):
    return lfilter([1.0 - a], [1.0, -a], x)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _conv_fwd_nb(xpad, w, stride, m_out):
        bsz = xpad.shape[0]
        n, c_in, c_out = w.shape
        out = np.zeros((bsz, m_out, c_out), dtype=xpad.dtype)
        for b in range(bsz):
            for i in range(m_out):
                base = i * stride
                acc = out[b, i]
                for t in range(n):
                    row = xpad[b, base + t]
                    wt = w[t]
                    for c in range(c_in):
                        v = row[c]
                        wc = wt[c]
                        for o in range(c_out):
                            acc[o] += v * wc[o]
        return out

    @njit(cache=True, fastmath=True)
    def _conv_wgrad_nb(xpad, gout, stride, n):
        bsz, m_out, c_out = gout.shape
        c_in = xpad.shape[2]
        gw = np.zeros((n, c_in, c_out), dtype=gout.dtype)
        for b in range(bsz):
            for i in range(m_out):
                base = i * stride
                g = gout[b, i]
                for t in range(n):
                    row = xpad[b, base + t]
                    gwt = gw[t]
                    for c in range(c_in):
                        v = row[c]
                        gwc = gwt[c]
                        for o in range(c_out):
                            gwc[o] += v * g[o]
        return gw

    @njit(cache=True, fastmath=True)
    def _conv_igrad_nb(gout, w, stride, mp):
        bsz, m_out, c_out = gout.shape
        n, c_in, _ = w.shape
        gx = np.zeros((bsz, mp, c_in), dtype=gout.dtype)
        for b in range(bsz):
            for i in range(m_out):
                base = i * stride
                g = gout[b, i]
                for t in range(n):
                    dst = gx[b, base + t]
                    wt = w[t]
                    for c in range(c_in):
                        wc = wt[c]
                        acc = 0.0
                        for o in range(c_out):
                            acc += g[o] * wc[o]
                        dst[c] += acc
        return gx

    @njit(cache=True)
    def _dc_block_nb(x, r):
        y = np.empty_like(x)
        prev_x = 0.0
        prev_y = 0.0
        for i in range(x.shape[0]):
            cur = x[i] - prev_x + r * prev_y
            y[i] = cur
            prev_x = x[i]
            prev_y = cur
        return y

    @njit(cache=True)
    def _one_pole_nb(x, a):
        y = np.empty_like(x)
        state = 0.0
        g = 1.0 - a
        for i in range(x.shape[0]):
            state = a * state + g * x[i]
            y[i] = state
        return y

    def conv_fwd_nb(xpad, w, stride, m_out):
        return _conv_fwd_nb(xpad, w.astype(xpad.dtype, copy=False), stride, m_out)

    def conv_wgrad_nb(xpad, gout, stride, n):
        return _conv_wgrad_nb(xpad, gout.astype(xpad.dtype, copy=False), stride, n)

    def conv_igrad_nb(gout, w, stride, mp):
        return _conv_igrad_nb(gout, w.astype(gout.dtype, copy=False), stride, mp)

    def dc_block_nb(x, r):
        return _dc_block_nb(np.ascontiguousarray(x, dtype=np.float64), float(r))

    def one_pole_nb(x, a):
        return _one_pole_nb(np.ascontiguousarray(x, dtype=np.float64), float(a))


IMPLS = {
    "numpy": {
        "conv_fwd": conv_fwd_np,
        "conv_wgrad": conv_wgrad_np,
        "conv_igrad": conv_igrad_np,
        "dc_block": dc_block_np,
        "one_pole": one_pole_np,
    }
}
if HAVE_NUMBA:
    IMPLS["numba"] = {
        "conv_fwd": conv_fwd_nb,
        "conv_wgrad": conv_wgrad_nb,
        "conv_igrad": conv_igrad_nb,
        "dc_block": dc_block_nb,
        "one_pole": one_pole_nb,
    }

_active = IMPLS[BACKEND]
conv_fwd = _active["conv_fwd"]
conv_wgrad = _active["conv_wgrad"]
conv_igrad = _active["conv_igrad"]
dc_block = _active["dc_block"]
one_pole = _active["one_pole"]


def set_threads(n: int) -> None:
    """Limit BLAS and numba worker threads for this process."""
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
    if HAVE_NUMBA:
        with warnings.catch_warnings():  # threading-layer probing is noisy
            warnings.simplefilter("ignore")
            numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
