"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent gradients.  ``backward`` walks the recorded graph
once in reverse topological order and then releases it.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64 if os.environ.get("DUALRECON_FLOAT64") == "1" else np.float32
_GRAD_ENABLED = True
_KINKS: list | None = None  # branch decisions of piecewise ops, when recording


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``np.float64`` for verification)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken by every relu / max / maxpool evaluated inside the block.

    Two evaluations with equal records lie on the same smooth piece of the function.
    """
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis):
        return max_(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _scatter_rows(idx: np.ndarray, src: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``src`` rows into ``n_rows`` rows by ``idx``, sequentially in index order."""
    tail = src.shape[idx.ndim:]
    width = int(np.prod(tail)) if tail else 1
    flat = (idx.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
    out = np.bincount(flat, weights=src.reshape(-1), minlength=n_rows * width)
    return out.reshape((n_rows,) + tail).astype(src.dtype, copy=False)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(mask)

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def bw(g):
        return (g * y * (1 - y),)

    return _make(y, (x,), bw, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy evaluated stably from logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def bw(g):
        return (g * (_sigmoid_np(z) - t) / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "bce")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def gather_rows(x: Tensor, index) -> Tensor:
    """``x[index]`` along axis 0 for an integer index array of any shape."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows: index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise IndexError(f"gather_rows: index {bad} out of bounds for {x.shape[0]} rows")

    def bw(g):
        return (_scatter_rows(idx, g, x.shape[0]),)

    return _make(x.data[idx], (x,), bw, "gather_rows")


def scatter_add_rows(src: Tensor, index, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into ``n_rows`` output rows; accumulation follows index order."""
    idx = np.asarray(index)
    if idx.shape != src.shape[: idx.ndim]:
        raise ShapeError(f"scatter_add_rows: index shape {idx.shape} does not prefix {src.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise IndexError(f"scatter_add_rows: index {bad} out of bounds for {n_rows} rows")
    out = _scatter_rows(idx, src.data, n_rows)

    def bw(g):
        return (g[idx],)

    return _make(out, (src,), bw, "scatter_add_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)
    if _KINKS is not None:
        _KINKS.append(arg)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.squeeze(out, axis=axis), (x,), bw, "max")


# ---------------------------------------------------------------------------
# grid operators (channel-last layout: batch, *spatial, channels)
# ---------------------------------------------------------------------------

def _offsets(n_spatial: int, k: int):
    return list(np.ndindex(*([k] * n_spatial)))


def conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 (2-D) or 3x3x3 (3-D) convolution, stride 1, zero padding 1.

    ``x`` is (B, *S, Cin) and ``w`` is (3, ..., 3, Cin, Cout).
    """
    ns = x.ndim - 2
    if ns not in (2, 3) or w.ndim != ns + 2 or w.shape[:ns] != (3,) * ns or w.shape[ns] != x.shape[-1]:
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {w.shape}")
    cin, cout = w.shape[-2], w.shape[-1]
    spatial = x.shape[1:-1]
    pad = [(0, 0)] + [(1, 1)] * ns + [(0, 0)]
    xp = np.pad(x.data, pad)
    offs = _offsets(ns, 3)
    cols = np.stack(
        [xp[(slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))] for off in offs],
        axis=-2,
    )
    cols2 = cols.reshape(-1, len(offs) * cin)
    w2 = w.data.reshape(len(offs) * cin, cout)
    out = (cols2 @ w2).reshape(x.shape[:-1] + (cout,))
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(cols.shape)
            gxp = np.zeros_like(xp)
            for i, off in enumerate(offs):
                gxp[(slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))] += gcols[..., i, :]
            gx = gxp[(slice(None),) + tuple(slice(1, 1 + s) for s in spatial)]
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw, "conv")


def conv_transpose(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel 2 and stride 2 (doubles every spatial extent).

    ``x`` is (B, *S, Cin) and ``w`` is (2, ..., 2, Cin, Cout).
    """
    ns = x.ndim - 2
    if ns not in (2, 3) or w.ndim != ns + 2 or w.shape[:ns] != (2,) * ns or w.shape[ns] != x.shape[-1]:
        raise ShapeError(f"conv_transpose: input {x.shape} incompatible with kernel {w.shape}")
    cin, cout = w.shape[-2], w.shape[-1]
    B, spatial = x.shape[0], x.shape[1:-1]
    # kernel as (Cin, 2^ns * Cout)
    wk = np.moveaxis(w.data, ns, 0).reshape(cin, -1)
    y = x.data.reshape(-1, cin) @ wk  # (B*prod(S), 2^ns*Cout)
    y = y.reshape((B,) + spatial + (2,) * ns + (cout,))
    # interleave: (B, S0, 2, S1, 2, ..., C)
    perm = [0] + [v for i in range(ns) for v in (1 + i, 1 + ns + i)] + [1 + 2 * ns]
    out = np.transpose(y, perm).reshape((B,) + tuple(2 * s for s in spatial) + (cout,))
    if b is not None:
        out = out + b.data
    inv = np.argsort(perm)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gy = np.transpose(g.reshape([B] + [v for s in spatial for v in (s, 2)] + [cout]), inv)
        gy = gy.reshape(-1, wk.shape[1])
        gx = (gy @ wk.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gwk = x.data.reshape(-1, cin).T @ gy
            gw = np.moveaxis(gwk.reshape((cin,) + (2,) * ns + (cout,)), 0, ns)
        if b is None:
            return gx, gw
        return gx, gw, (g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None)

    return _make(np.ascontiguousarray(out), parents, bw, "conv_transpose")


def maxpool(x: Tensor) -> Tensor:
    """2x2 (or 2x2x2) max pooling with stride 2 over the spatial axes."""
    ns = x.ndim - 2
    spatial = x.shape[1:-1]
    if ns not in (2, 3) or any(s % 2 for s in spatial):
        raise ShapeError(f"maxpool: spatial extents of {x.shape} must be even")
    B, C = x.shape[0], x.shape[-1]
    half = tuple(s // 2 for s in spatial)
    split = x.data.reshape([B] + [v for h in half for v in (h, 2)] + [C])
    perm = [0] + [1 + 2 * i for i in range(ns)] + [1 + 2 * ns] + [2 + 2 * i for i in range(ns)]
    win = np.transpose(split, perm).reshape((B,) + half + (C, 2 ** ns))
    arg = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]
    if _KINKS is not None:
        _KINKS.append(arg)
    inv = np.argsort(perm)

    def bw(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        gsplit = np.transpose(gwin.reshape((B,) + half + (C,) + (2,) * ns), inv)
        return (gsplit.reshape(x.shape),)

    return _make(out, (x,), bw, "maxpool")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Populate ``.grad`` on every leaf that requires grad, then release the graph."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward: graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
