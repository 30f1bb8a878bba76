"""Dense-tensor numerics with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and records the op that produced it, so a
scalar loss can be backpropagated through an arbitrary graph of the primitive
ops defined here (elementwise arithmetic, matmul, conv, pooling, softmax,
shape ops, indexing). Gradients accumulate into ``.grad`` and must be zeroed
explicitly between backward passes.

Default element type is float32; the gradient-check harness runs graphs in
float64 so central differences stay meaningful.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (teacher inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, grad={self.requires_grad})"

    # -- gradient machinery ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; each graph node is visited once.

        Gradients accumulate into existing ``.grad`` buffers, so callers must
        zero parameters between steps.
        """
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    # method aliases used all over the detector code
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs from deep conv stacks overflow recursive variants.
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


class OpGraph:
    """Topologically ordered view of the graph below a root tensor."""

    def __init__(self, nodes: list[Tensor], parameters: dict[str, Tensor]):
        self.nodes = nodes
        self.parameters = parameters

    @classmethod
    def trace(cls, root: Tensor) -> "OpGraph":
        nodes = _toposort(root)
        params = {
            f"leaf{i}": n
            for i, n in enumerate(nodes)
            if n._op == "leaf" and n.requires_grad
        }
        return cls(nodes, params)

    def op_names(self) -> list[str]:
        return [n._op for n in self.nodes if n._op != "leaf"]


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), "neg", backward)


def power(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), "power", backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), "sqrt", backward)


def abs_(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0; gradient checks resample away from the kink.
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), "abs", backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), "relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data.astype(a.data.dtype), (a,), "sigmoid", backward)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) to avoid overflow
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * sig)

    return _make(out_data.astype(x.dtype), (a,), "softplus", backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # Ties route the gradient to the first argument.
    mask = a.data >= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * mask, a.shape))
        b._accumulate(_unbroadcast(g * ~mask, b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), "maximum", backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data <= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * mask, a.shape))
        b._accumulate(_unbroadcast(g * ~mask, b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), "minimum", backward)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``cond`` is a plain boolean array, not a Tensor."""
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        a._accumulate(_unbroadcast(g * cond, a.shape))
        b._accumulate(_unbroadcast(g * ~cond, b.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), "where", backward)


# -- reductions ------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gk, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gk / n, a.shape))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            t._accumulate(g[tuple(idx)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        "concat",
        backward,
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _make(a.data[idx].copy(), (a,), "narrow", backward)


def split(a: Tensor, sizes: Iterable[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into chunks of the given sizes (must cover it)."""
    sizes = list(sizes)
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(a, axis, start, s))
        start += s
    return out


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        target = np.moveaxis(a.grad, axis, 0)
        np.add.at(target, indices, np.moveaxis(g, axis, 0))

    return _make(np.take(a.data, indices, axis=axis), (a,), "take", backward)


def gather(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis`` with gradient scatter-add (duplicate-safe)."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(a.data)
        grid = list(np.indices(indices.shape, sparse=True))
        grid[axis] = indices
        np.add.at(gx, tuple(grid), g)
        a._accumulate(gx)

    return _make(np.take_along_axis(a.data, indices, axis=axis), (a,), "gather", backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with x of shape (n, in) and weight (out, in)."""
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


# -- softmax family ---------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", backward)


# -- spatial ops (NCHW) -------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    gc = gcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[
                :, :, i, j
            ]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, x: (N,Cin,H,W), weight: (Cout,Cin,Kh,Kw)."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
            f"kernel {weight.shape} expects {cin_w}"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        weight._accumulate(
            np.einsum("nop,nkp->ok", g2, cols).reshape(weight.shape)
        )
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gcols = np.matmul(wmat.T, g2)
        x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding))

    return _make(out_data, parents, "conv2d", backward)


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, k * k
    )
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h, w
        )
        x._accumulate(gx)

    return _make(out_data, (x,), "max_pool2d", backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    out_data = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, ho, k, wo, k)
        ).reshape(n, c, h, w)
        x._accumulate(gx)

    return _make(out_data, (x,), "avg_pool2d", backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), "upsample2x", backward)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: reshape(g, C/g) -> transpose -> flatten.

    With 6 channels and 2 groups the new order is [0, 3, 1, 4, 2, 5]. A pure
    permutation, so the gradient is exact (the inverse permutation).
    """
    n, c = x.shape[0], x.shape[1]
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    per = c // groups
    perm = np.arange(c).reshape(groups, per).T.reshape(-1)
    inv = np.argsort(perm)

    def backward(g):
        x._accumulate(g[:, inv])

    return _make(np.ascontiguousarray(x.data[:, perm]), (x,), "channel_shuffle", backward)
