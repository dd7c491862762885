"""Small reverse-mode autodiff core over numpy arrays.

Only the layer set of the Y-Net is covered: feature-axis (de)convolutions,
leaky ReLU, hard sigmoid, tanh, a ConvLSTM step, the compressed complex
mask and a weighted squared-error reduction. Activations are laid out as
``(batch, feature, channel)``; the unit time axis of the M x 1 x C feature
maps is dropped internally.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _kernels

_GRAD_ENABLED = True
CHECK_FINITE = os.environ.get("Y2NET_CHECK_FINITE", "0") == "1"


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_check_finite(flag: bool) -> None:
    """Raise ``FloatingPointError`` as soon as any op produces NaN/inf."""
    global CHECK_FINITE
    CHECK_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf carrying its Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class _Indexed:
    """Gradient that touches only ``index`` of its parent."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss._done:
        raise RuntimeError("backward() already ran on this graph; rebuild it first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tracked tensor")
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()

    def accumulate(node, g):
        key = id(node)
        if isinstance(g, _Indexed):
            buf = grads.get(key)
            if buf is None:
                buf = np.zeros_like(node.data)
                grads[key] = buf
                owned.add(key)
            elif key not in owned:
                buf = buf.copy()
                grads[key] = buf
                owned.add(key)
            buf[g.index] += g.value
            return
        if key in grads:
            if key in owned:
                grads[key] += g
            else:
                grads[key] = grads[key] + g
                owned.add(key)
        else:
            grads[key] = g

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is not None and parent.requires_grad:
                accumulate(parent, pg)
    loss._done = True
    for node in order:
        if node._backward is not None:
            node._done = True
            node._parents = ()
            node._backward = None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(x, slope: float = 0.3) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky slope must lie in (0, 1)")
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, slope * x.data), (x,), lambda g: (np.where(pos, g, slope * g),))


def hard_sigmoid(x) -> Tensor:
    """``clamp(0.2 x + 0.5, 0, 1)``"""
    x = as_tensor(x)
    y = np.clip(0.2 * x.data + 0.5, 0.0, 1.0)
    live = (x.data > -2.5) & (x.data < 2.5)
    return _result(y, (x,), lambda g: (np.where(live, 0.2 * g, 0.0).astype(g.dtype),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def narrow(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return _result(x.data[index], (x,), lambda g: (_Indexed(index, g),))


def take(x, i: int, axis: int = 1) -> Tensor:
    """Select one position along ``axis`` (dropping the axis)."""
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = i
    index = tuple(index)
    return _result(x.data[index], (x,), lambda g: (_Indexed(index, g),))


def stack(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shp, dt = x.shape, x.dtype
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shp).astype(dt),))


def weighted_sq_sum(x, weights) -> Tensor:
    """``sum(weights * x**2)`` with a constant, broadcastable weight array."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    xd = x.data
    return _result(np.asarray((w * xd * xd).sum()), (x,), lambda g: (2.0 * g * w * xd,))


# ---------------------------------------------------------------------------
# feature-axis convolutions


def same_padding(m_in: int, n: int, stride: int) -> tuple[int, int, int]:
    """Output length and (left, right) zero padding; the odd zero goes right."""
    m_out = -(-m_in // stride)
    total = max((m_out - 1) * stride + n - m_in, 0)
    return m_out, total // 2, total - total // 2


def _check_stride(stride):
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Cross-correlation along the feature axis with 'same' padding.

    x: (B, M_in, C_in), w: (N, C_in, C_out), b: (C_out,) -> (B, ceil(M_in/s), C_out)
    """
    _check_stride(stride)
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape}, weights {w.shape}")
    n = w.shape[0]
    m_in = x.shape[1]
    m_out, pl, pr = same_padding(m_in, n, stride)
    xpad = np.pad(x.data, ((0, 0), (pl, pr), (0, 0)))
    wd = w.data
    out = _kernels.conv_fwd(xpad, wd, stride, m_out)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[2],):
            raise ValueError("bias must have one entry per output channel")
        out = out + b.data
        parents.append(b)
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = _kernels.conv_igrad(g, wd, stride, xpad.shape[1])[:, pl : pl + m_in]
        if w.requires_grad:
            gw = _kernels.conv_wgrad(xpad, g, stride, n)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _result(out, parents, bw)


def deconv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed feature-axis convolution, the adjoint of :func:`conv1d`.

    x: (B, M_in, C_in), w: (N, C_in, C_out) -> (B, M_in*stride, C_out).
    ``deconv1d(y, w)`` equals the input gradient of ``conv1d(., w.transpose(0, 2, 1))``.
    """
    _check_stride(stride)
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ValueError(f"deconv1d shape mismatch: input {x.shape}, weights {w.shape}")
    n = w.shape[0]
    m_in = x.shape[1]
    m_out = m_in * stride
    _, pl, pr = same_padding(m_out, n, stride)
    mp = m_out + pl + pr
    wt = np.ascontiguousarray(w.data.transpose(0, 2, 1))
    full = _kernels.conv_igrad(np.ascontiguousarray(x.data), wt, stride, mp)
    out = full[:, pl : pl + m_out]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[2],):
            raise ValueError("bias must have one entry per output channel")
        out = out + b.data
        parents.append(b)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    xd = x.data

    def bw(g):
        gpad = np.pad(g, ((0, 0), (pl, pr), (0, 0)))
        gx = gw = None
        if x.requires_grad:
            gx = _kernels.conv_fwd(gpad, wt, stride, m_in)
        if w.requires_grad:
            gw = _kernels.conv_wgrad(gpad, np.ascontiguousarray(xd), stride, n).transpose(0, 2, 1)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _result(out, parents, bw)


def convlstm_step(x, h, c, wx, wh, b):
    """One ConvLSTM update (no peepholes, gate order i, f, g, o).

    x: (B, M, C_in); h, c: (B, M, F); wx: (N, C_in, 4F); wh: (N, F, 4F); b: (4F,).
    Returns ``(h', c')``; the layer output is ``h'``.
    """
    return convlstm_gates(conv1d(x, wx, b), h, c, wh)


def convlstm_gates(zx, h, c, wh):
    """ConvLSTM update given the precomputed input projection ``zx = conv(x) + b``."""
    h, c = as_tensor(h), as_tensor(c)
    f_maps = h.shape[-1]
    if zx.shape[-1] != 4 * f_maps or c.shape != h.shape or zx.shape[:-1] != h.shape[:-1]:
        raise ValueError(f"ConvLSTM state/shape mismatch: z {zx.shape}, h {h.shape}, c {c.shape}")
    z = add(zx, conv1d(h, wh, None, 1))
    gi = hard_sigmoid(narrow(z, 0, f_maps))
    gf = hard_sigmoid(narrow(z, f_maps, 2 * f_maps))
    gg = tanh(narrow(z, 2 * f_maps, 3 * f_maps))
    go = hard_sigmoid(narrow(z, 3 * f_maps, 4 * f_maps))
    c_new = add(mul(gf, c), mul(gi, gg))
    h_new = mul(go, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# compressed complex mask


def _mask_gain(a, b):
    """tanh(r)/r and its radial derivative over r, r = |a + ib|; both finite at 0."""
    r2 = a * a + b * b
    r = np.sqrt(r2)
    small = r < 1e-4
    rs = np.where(small, 1.0, r)
    th = np.tanh(rs)
    phi = np.where(small, 1.0 - r2 / 3.0, th / rs)
    psi = np.where(small, -2.0 / 3.0 + 8.0 * r2 / 15.0, ((1.0 - th * th) * rs - th) / (rs * rs * rs))
    return phi, psi


def compressed_mask(e, m) -> Tensor:
    """``E * tanh(|M|) * M / |M|`` per bin, channels (..., 2) = (real, imag).

    At M = 0 the result is 0 (continuous limit).
    """
    e, m = as_tensor(e), as_tensor(m)
    if e.shape != m.shape or e.shape[-1] != 2:
        raise ValueError("compressed_mask needs equal shapes with a trailing real/imag axis")
    er, ei = e.data[..., 0], e.data[..., 1]
    a, bb = m.data[..., 0], m.data[..., 1]
    phi, psi = _mask_gain(a, bb)
    gr, gim = phi * a, phi * bb
    out = np.stack([er * gr - ei * gim, er * gim + ei * gr], axis=-1).astype(e.dtype, copy=False)

    def bw(g):
        sr, si = g[..., 0], g[..., 1]
        ge = np.stack([sr * gr + si * gim, -sr * gim + si * gr], axis=-1)
        dgr = sr * er + si * ei
        dgi = -sr * ei + si * er
        ga = dgr * (phi + psi * a * a) + dgi * (psi * a * bb)
        gb = dgr * (psi * a * bb) + dgi * (phi + psi * bb * bb)
        return ge, np.stack([ga, gb], axis=-1)

    return _result(out, (e, m), bw)


# ---------------------------------------------------------------------------
# optimisation


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def adam_update(params, lr: float, grads=None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam step with bias correction. ``grads`` defaults to each ``p.grad``;
    parameters without a gradient are skipped."""
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
