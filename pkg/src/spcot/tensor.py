"""A small define-by-run reverse-mode autodiff engine over float64 arrays.

Only the operations needed by the losses and the segmentation network are
provided.  Elementwise binary ops require equal shapes or a Python/0-d scalar
on one side; anything else raises ``ShapeError``.

Recording happens on the calling thread's active :class:`Tape`::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)      # or backward(loss)
"""

import threading

import numpy as np

from . import _kernels

PROB_FLOOR = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reused tape, ...)."""


class NumericalError(FloatingPointError):
    """A NaN/inf reached a guarded operation."""


_debug = False


def set_debug(flag):
    """Enable NaN guards on log/softmax/backward. Returns the previous value."""
    global _debug
    prev, _debug = _debug, bool(flag)
    return prev


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Append-only record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def record(self, out, parents, backward_fn):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss):
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        grads = {id(loss): np.ones((), dtype=np.float64)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if _debug and not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient during backward")
            out.grad = g
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                elif parent._tape is self:
                    grads[key] = pg
                else:
                    # leaf (parameter or input) - accumulate onto .grad
                    parent.grad = pg if parent.grad is None else parent.grad + pg
        self.nodes = []
        self.consumed = True


class no_tape:
    """Context manager that suspends recording on this thread."""

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def backward(loss):
    """Backpropagate from a scalar loss through the tape it was recorded on."""
    if loss._tape is None:
        raise TapeError("loss is not attached to a tape")
    loss._tape.backward(loss)


class Tensor:
    """float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _is_scalar(t):
    return t.data.ndim == 0


def _check_pair(a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g, t):
    return g.sum() if _is_scalar(t) and g.ndim else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _reduce_to(ga, a), _reduce_to(-ga * out, b)

    return _make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def log(a):
    """Natural log. Callers clamp to ``PROB_FLOOR`` first."""
    a = as_tensor(a)
    ad = a.data
    if _debug and np.any(ad <= 0.0):
        raise NumericalError("log of a non-positive value; clamp inputs first")
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0.0),))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make(out, (a,), lambda g: (g * mask,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"shape mismatch: {tensors[0].shape} vs {t.shape}")
    return _make(np.stack([t.data for t in tensors]), tuple(tensors), lambda g: tuple(g))


def rows(a, start, stop):
    """Slice ``a[start:stop]`` along the leading axis."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), bw)


def concat(tensors):
    """Concatenate along the leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors])
    return _make(out, tuple(tensors), lambda g: tuple(g[sizes[i]:sizes[i + 1]] for i in range(len(tensors))))


def rot90_each(a, rs):
    """Rotate sample i of a batch by rs[i] quarter turns over the last two axes."""
    a = as_tensor(a)
    rs = [int(r) % 4 for r in rs]
    if len(rs) != a.shape[0]:
        raise ShapeError(f"{len(rs)} rotations for a batch of {a.shape[0]}")
    if any(r % 2 for r in rs) and a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"odd quarter-turn needs square spatial dims, got {a.shape[-2:]}")

    def rot(x, sign):
        return np.stack([np.rot90(xi, sign * r, axes=(-2, -1)) for xi, r in zip(x, rs)])

    return _make(rot(a.data, 1), (a,), lambda g: (rot(g, -1),))


def rot90(a, r):
    """Rotate the last two axes by r quarter turns (counter-clockwise)."""
    a = as_tensor(a)
    r = int(r) % 4
    if r % 2 and a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"odd quarter-turn needs square spatial dims, got {a.shape[-2:]}")
    out = np.ascontiguousarray(np.rot90(a.data, r, axes=(-2, -1)))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(np.rot90(g, -r, axes=(-2, -1))),))


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias):
    """'Same' zero-padded cross-correlation.

    x is [Cin,H,W] or [N,Cin,H,W]; kernel [Cout,Cin,k,k] with k odd; bias [Cout].
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be [Cout,Cin,k,k] with odd k, got {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout={kernel.shape[0]}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != kernel.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    xd = np.ascontiguousarray(xd)
    wd = np.ascontiguousarray(kernel.data)
    out = _kernels.conv2d_forward(xd, wd, bias.data)

    def bw(g):
        g4 = np.ascontiguousarray(g[None] if unbatched else g)
        gx, gw, gb = _kernels.conv2d_backward(xd, wd, g4, x.requires_grad)
        if gx is not None and unbatched:
            gx = gx[0]
        return gx, gw, gb

    return _make(out[0] if unbatched else out, (x, kernel, bias), bw)


def softmax_channels(logits):
    """Softmax over the channel axis (-3) of [C,H,W] or [N,C,H,W] logits."""
    logits = as_tensor(logits)
    z = logits.data
    if logits.ndim < 3:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {logits.shape}")
    if np.isnan(z).any():
        raise NumericalError("NaN in softmax input")
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    p = e / e.sum(axis=-3, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _make(p, (logits,), bw)
