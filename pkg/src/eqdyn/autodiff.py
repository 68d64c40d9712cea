"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the equivariant layers need are provided. Every op
builds its output from numpy arrays and, when any input requires a
gradient, records a closure that maps the output cotangent to input
cotangents. ``backward`` replays those closures in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PADDING_MODES = ("zero", "periodic", "none")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, data transforms)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by op {op or 'leaf'!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce("min", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale_by(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale_by")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a plain boolean array (no gradient)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "relu": relu,
    "scale_by": scale_by, "log": log, "square": square, "sqrt": sqrt, "abs": absolute,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name; mirrors the operator table used by the layers."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if not axes:
        raise ValueError("empty axis set: pass axis=None for a full reduction")
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated axes {axis}")
    return axes


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)
    elif op == "mean":
        count = int(np.prod([a.shape[i] for i in axes]))
        out = a.data.mean(axis=axes, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, a.shape).copy(),)
    elif op in ("max", "min"):
        # gradient goes to the first extremal element along the flattened reduced axes
        rest = [i for i in range(a.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = a.data.transpose(perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1) if op == "max" else flat.argmin(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = vals.reshape(kept_shape) if keepdims else vals

        def back(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            return (gf.reshape(moved.shape).transpose(np.argsort(perm)),)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), back, f"reduce_{op}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % (ts[0].ndim + 1)
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))), "stack")


def linear_map(a, fwd: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray],
               op: str = "linear_map") -> Tensor:
    """Apply a fixed linear operator given as a (forward, adjoint) pair."""
    a = as_tensor(a)
    return _make(np.asarray(fwd(a.data), dtype=np.float64), (a,), lambda g: (adjoint(g),), op)


def mse(pred, target) -> Tensor:
    return reduce("mean", square(sub(pred, target)))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _fold_matrix(n_padded: int, n: int, pad: int) -> np.ndarray:
    m = np.zeros((n_padded, n))
    m[np.arange(n_padded), (np.arange(n_padded) - pad) % n] = 1.0
    return m


def pad2d(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0 or mode == "none":
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "periodic":
        return np.pad(x, widths, mode="wrap")
    if mode == "zero":
        return np.pad(x, widths, mode="constant")
    raise ValueError(f"padding must be one of {PADDING_MODES}, got {mode!r}")


def unpad2d(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`pad2d`."""
    if pad == 0 or mode == "none":
        return g
    if mode == "zero":
        return g[..., pad:-pad, pad:-pad]
    hp, wp = g.shape[-2:]
    h, w = hp - 2 * pad, wp - 2 * pad
    fh, fw = _fold_matrix(hp, h, pad), _fold_matrix(wp, w, pad)
    return np.einsum("...ij,iI,jJ->...IJ", g, fh, fw, optimize=True)


def _windows(xp: np.ndarray, s: int, dilation: int) -> np.ndarray:
    span = dilation * (s - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(-2, -1))
    return win[..., ::dilation, ::dilation]


def _check_conv(x: np.ndarray, w: np.ndarray, padding: str, dilation: int) -> int:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects [B,C,H,W] input and [O,C,s,s] kernel, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    s = w.shape[2]
    if w.shape[3] != s:
        raise ValueError(f"conv2d needs a square kernel, got {w.shape[2:]}")
    if s % 2 == 0:
        raise ValueError(f"conv2d needs an odd kernel size, got {s}")
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    span = dilation * (s - 1) + 1
    if x.shape[2] < s or x.shape[3] < s or (padding == "none" and min(x.shape[2:]) < span):
        raise ValueError(f"input {x.shape[2:]} smaller than kernel footprint {span}")
    return s


CONV_METHODS = ("auto", "direct", "fft")


def conv2d(x, w, padding: str = "periodic", dilation: int = 1, method: str = "auto") -> Tensor:
    """Cross-correlation ``out[b,o,p] = sum_{c,q} x[b,c,p+d*q] w[o,c,q]``.

    ``zero`` and ``periodic`` padding keep the spatial size; ``none`` is a
    valid correlation. ``method="direct"`` uses an im2col matrix product;
    ``"fft"`` (periodic padding only) multiplies spectra, which costs the
    same for every kernel size. ``"auto"`` picks fft for periodic padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.data, w.data, padding, int(dilation))
    if method not in CONV_METHODS:
        raise ValueError(f"method must be one of {CONV_METHODS}")
    if method == "fft" and padding != "periodic":
        raise ValueError("the fft path needs periodic padding")
    if method == "fft" or (method == "auto" and padding == "periodic"):
        return _conv2d_fft(x, w, int(dilation))
    return _conv2d_direct(x, w, padding, int(dilation))


def _conv2d_direct(x: Tensor, w: Tensor, padding: str, d: int) -> Tensor:
    s = w.shape[-1]
    o_, c_ = w.shape[:2]
    pad = 0 if padding == "none" else d * (s // 2)
    xp = pad2d(x.data, pad, padding)
    win = _windows(xp, s, d)  # B,C,H',W',s,s
    b_, _, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b_ * ho * wo, c_ * s * s)
    wmat = w.data.reshape(o_, c_ * s * s)
    out = (cols @ wmat.T).reshape(b_, ho, wo, o_).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b_ * ho * wo, o_)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(b_, ho, wo, c_, s, s)
            gxp = np.zeros_like(xp)
            for i in range(s):
                for j in range(s):
                    gxp[:, :, i * d:i * d + ho, j * d:j * d + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = unpad2d(gxp, pad, padding)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), back, "conv2d")


def _tap_index(s: int, d: int, n: int) -> np.ndarray:
    return (d * (np.arange(s) - s // 2)) % n


def _freq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[i,k,h,w] = sum_j a[i,j,h,w] b[j,k,h,w]`` as one batched matmul per frequency."""
    am = np.moveaxis(a, (0, 1), (-2, -1))
    bm = np.moveaxis(b, (0, 1), (-2, -1))
    return np.moveaxis(am @ bm, (-2, -1), (0, 1))


def _conv2d_fft(x: Tensor, w: Tensor, d: int) -> Tensor:
    h, wd = x.shape[-2:]
    o_, c_, s, _ = w.shape
    ri, ci = _tap_index(s, d, h), _tap_index(s, d, wd)
    kimg = np.zeros((o_, c_, h, wd))
    np.add.at(kimg, (slice(None), slice(None), ri[:, None], ci[None, :]), w.data)
    xf = np.fft.rfft2(x.data)
    kf = np.fft.rfft2(kimg)
    kft = np.conj(kf).transpose(1, 0, 2, 3)  # c,o
    out = np.fft.irfft2(_freq_matmul(xf, kft), s=(h, wd))

    def back(g):
        gf = np.fft.rfft2(g)
        gx = gw = None
        if x.requires_grad:
            gx = np.fft.irfft2(_freq_matmul(gf, kf), s=(h, wd))
        if w.requires_grad:
            gk = np.fft.irfft2(_freq_matmul(np.conj(gf).transpose(1, 0, 2, 3), xf), s=(h, wd))
            gw = gk[:, :, ri[:, None], ci[None, :]]
        return gx, gw

    return _make(out, (x, w), back, "conv2d")


def slice_correlation(v, terms: Sequence[Sequence[tuple[int, "Tensor"]]]) -> Tensor:
    """Periodic correlations summed over slices of a stacked input.

    ``v`` is ``[B, S, C, H, W]``; ``terms[k]`` lists ``(slice index, kernel)``
    pairs and output slice k is ``sum conv2d(v[:, i], kernel)``. Each input
    and gradient slice is Fourier transformed once however many kernels
    read it. Kernels are ``[O, C, s, s]`` with odd s (any s, wrapping
    periodically when larger than the grid).
    """
    v = as_tensor(v)
    b_, n_s, c_, h, wd = v.shape
    kernels = []
    plan = []
    for row in terms:
        entries = []
        for i, k in row:
            k = as_tensor(k)
            if k.ndim != 4 or k.shape[1] != c_ or k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
                raise ValueError(f"kernel {k.shape} does not fit input slices with {c_} channels")
            if not 0 <= i < n_s:
                raise ValueError(f"slice index {i} out of range")
            entries.append((i, len(kernels)))
            kernels.append(k)
        plan.append(entries)
    if not kernels:
        raise ValueError("slice_correlation needs at least one kernel")
    o_ = kernels[0].shape[0]
    taps = []
    kfs = []
    for k in kernels:
        s = k.shape[-1]
        ri, ci = _tap_index(s, 1, h), _tap_index(s, 1, wd)
        kimg = np.zeros((o_, c_, h, wd))
        np.add.at(kimg, (slice(None), slice(None), ri[:, None], ci[None, :]), k.data)
        taps.append((ri, ci))
        kfs.append(np.fft.rfft2(kimg))
    vf = np.fft.rfft2(v.data)  # B,S,C,H,F
    outs_f = []
    for entries in plan:
        acc = 0
        for i, ki in entries:
            acc = acc + _freq_matmul(vf[:, i], np.conj(kfs[ki]).transpose(1, 0, 2, 3))
        outs_f.append(acc if entries else np.zeros((b_, o_) + vf.shape[-2:], dtype=complex))
    out = np.fft.irfft2(np.stack(outs_f, axis=1), s=(h, wd))

    def back(g):
        gf = np.fft.rfft2(g)  # B,K,O,H,F
        gv = None
        if v.requires_grad:
            gvf = np.zeros_like(vf)
            for k_out, entries in enumerate(plan):
                for i, ki in entries:
                    gvf[:, i] += _freq_matmul(gf[:, k_out], kfs[ki])
            gv = np.fft.irfft2(gvf, s=(h, wd))
        gks = [None] * len(kernels)
        for k_out, entries in enumerate(plan):
            gct = np.conj(gf[:, k_out]).transpose(1, 0, 2, 3)
            for i, ki in entries:
                if kernels[ki].requires_grad:
                    gk = np.fft.irfft2(_freq_matmul(gct, vf[:, i]), s=(h, wd))
                    ri, ci = taps[ki]
                    gks[ki] = gk[:, :, ri[:, None], ci[None, :]]
        return (gv, *gks)

    return _make(out, (v, *kernels), back, "slice_correlation")


def conv2d_reference(x: np.ndarray, w: np.ndarray, padding: str = "periodic", dilation: int = 1) -> np.ndarray:
    """Direct loop oracle for :func:`conv2d` (test use; slow)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    s = _check_conv(x, w, padding, dilation)
    b_, c_, h, wd = x.shape
    o_ = w.shape[0]
    r = s // 2
    if padding == "none":
        span = dilation * (s - 1)
        ho, wo = h - span, wd - span
        off = 0
    else:
        ho, wo = h, wd
        off = -dilation * r
    out = np.zeros((b_, o_, ho, wo))
    for b in range(b_):
        for o in range(o_):
            for p in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for c in range(c_):
                        for i in range(s):
                            for j in range(s):
                                y = p + off + dilation * i
                                z = q + off + dilation * j
                                if padding == "periodic":
                                    y %= h
                                    z %= wd
                                elif padding == "zero" and not (0 <= y < h and 0 <= z < wd):
                                    continue
                                acc += x[b, c, y, z] * w[o, c, i, j]
                    out[b, o, p, q] = acc
    return out


def window_extreme(x, size: int, mode: str = "max", padding: str = "periodic") -> Tensor:
    """Stride-1 max/min over each ``size x size`` block, output same size as input."""
    x = as_tensor(x)
    if size % 2 == 0:
        raise ValueError("window size must be odd")
    if padding == "none":
        raise ValueError("window_extreme keeps spatial size; use zero or periodic padding")
    pad = size // 2
    xp = pad2d(x.data, pad, padding)
    win = sliding_window_view(xp, (size, size), axis=(-2, -1))
    flat = win.reshape(win.shape[:-2] + (size * size,))
    idx = flat.argmax(-1) if mode == "max" else flat.argmin(-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    h, w = out.shape[-2:]

    def back(g):
        gxp = np.zeros_like(xp)
        for k in range(size * size):
            i, j = divmod(k, size)
            gxp[..., i:i + h, j:j + w] += np.where(idx == k, g, 0.0)
        return (unpad2d(gxp, pad, padding),)

    return _make(out, (x,), back, f"window_{mode}")


def avg_pool2(x) -> Tensor:
    """Non-overlapping 2x2 average pooling (H, W even)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial size, got {(h, w)}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return _make(out, (x,), back, "avg_pool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling; preserves the spatial mean exactly."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    *lead, h, w = x.shape

    def back(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), back, "upsample2")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5, eps: float = 1e-12) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + |fd| + eps)."""
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    y = f(x)
    if y.data.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    if y.requires_grad:
        backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    fd = np.zeros_like(point)
    flat = point.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            fp = f(Tensor(point.copy())).item()
            flat[k] = old - h
            fm = f(Tensor(point.copy())).item()
            flat[k] = old
            fd.reshape(-1)[k] = (fp - fm) / (2 * h)
    err = np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + eps)
    return float(err.max()) if err.size else 0.0


def parameters_gradcheck(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                         eps: float = 1e-12, max_coords: int | None = None,
                         rng: np.random.Generator | None = None, per_tensor: bool = False) -> float:
    """Gradcheck of a scalar loss with respect to a set of parameter tensors.

    With ``max_coords`` a random subset of coordinates is checked. The
    default score is the worst per-coordinate ``|a - d| / (|a| + |d|)``.
    ``per_tensor`` scores each tensor by ``||a - d|| / (||a|| + ||d||)``
    over its checked coordinates instead, which is insensitive to
    roundoff on coordinates whose gradient is orders of magnitude below
    the rest.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    coords = [(pi, k) for pi, p in enumerate(params) for k in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    pairs: dict[int, list] = {}
    with no_grad():
        for pi, k in coords:
            p = params[pi]
            flat = p.data.reshape(-1)
            old = flat[k]
            flat[k] = old + h
            fp = loss_fn().item()
            flat[k] = old - h
            fm = loss_fn().item()
            flat[k] = old
            fd = (fp - fm) / (2 * h)
            an = 0.0 if p.grad is None else p.grad.reshape(-1)[k]
            pairs.setdefault(pi, []).append((an, fd))
    worst = 0.0
    for vals in pairs.values():
        a, d = np.array(vals).T
        if per_tensor:
            worst = max(worst, np.linalg.norm(a - d) / (np.linalg.norm(a) + np.linalg.norm(d) + eps))
        else:
            worst = max(worst, float(np.max(np.abs(a - d) / (np.abs(a) + np.abs(d) + eps))))
    return float(worst)
