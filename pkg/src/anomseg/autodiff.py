"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy float arrays (float32 by default, float64 for
gradient checking). Every operation records its inputs and a backward rule on
the output node; ``backward`` on a scalar walks the recorded graph once, in
reverse topological order, and accumulates gradients into every tensor that
requires them. Accumulation order is deterministic, so repeated runs on
identical inputs are bitwise identical.
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np
from scipy import special


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradError(RuntimeError):
    """Invalid use of the differentiation machinery (e.g. non-scalar loss)."""


class NumericError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs (debug mode only)."""


_grad_enabled: bool = True
_debug_checks: bool = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward op."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to 1-d
    return arr


class Tensor:
    """N-dimensional float array, optionally participating in the grad graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; numbers are treated as constants
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor with requires_grad=True."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def node(data: np.ndarray, parents: Sequence[Tensor], backward_rule) -> Tensor:
    """Create an op output, recording parents and backward rule if needed.

    ``backward_rule(g)`` must return one gradient array (or None) per parent;
    rules may return None for parents that do not require grad. Extension
    point for ops defined outside this module.
    """
    req = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                req = True
                break
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_rule
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericError("forward op produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g (broadcast shape) back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_data(a: Tensor, b, opname: str):
    """Forward data for a binary op; b may be a Tensor or a python number."""
    if isinstance(b, Tensor):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return None


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a  # number + tensor
    if isinstance(b, Tensor):
        _binary_data(a, b, "add")
        data = a.data + b.data
        return node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    data = a.data + b
    return node(data, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _binary_data(a, b, "sub")
        data = a.data - b.data
        return node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    if isinstance(a, Tensor):
        return node(a.data - b, (a,), lambda g: (g,))
    return node(a - b.data, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _binary_data(a, b, "mul")
        data = a.data * b.data
        ad, bd = a.data, b.data
        return node(data, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))
    data = a.data * b
    s = b
    return node(data, (a,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _binary_data(a, b, "div")
        data = a.data / b.data
        ad, bd = a.data, b.data
        return node(data, (a, b), lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ))
    if isinstance(a, Tensor):
        inv = 1.0 / b
        return node(a.data * inv, (a,), lambda g: (g * inv,))
    bd = b.data
    return node(a / bd, (b,), lambda g: (-g * a / (bd * bd),))


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    ad = a.data
    return node(data, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return node(data, (a,), lambda g: (g * data,))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    data = x * phi

    def backward_rule(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return node(data, (a,), backward_rule)


def sigmoid(a: Tensor) -> Tensor:
    data = special.expit(a.data)
    return node(data, (a,), lambda g: (g * data * (1.0 - data),))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_rule(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape) if need_a else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape) if need_b else None
        return ga, gb

    return node(data, (a, b), backward_rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for (..., N, Din) inputs, (Din, Dout) weight."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear inner dims differ: {x.shape} vs {w.shape}")
    data = x.data @ w.data + b.data
    xd, wd = x.data, w.data
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def backward_rule(g):
        gx = _unbroadcast(g @ wd.T, x.shape) if need_x else None
        gw = None
        if need_w:
            gw = _unbroadcast(xd.swapaxes(-1, -2) @ g, w.shape)
        gb = _unbroadcast(g, b.shape) if need_b else None
        return gx, gw, gb

    return node(data, (x, w, b), backward_rule)


def heads_view(x: Tensor, heads: int, transposed: bool = False) -> Tensor:
    """(B,N,C) -> (B,h,N,C/h), or (B,h,C/h,N) when transposed (channel-wise
    attention operates on the transposed layout)."""
    b, n, c = x.shape
    dh = c // heads
    split = x.data.reshape(b, n, heads, dh)
    if transposed:
        data = np.ascontiguousarray(split.transpose(0, 2, 3, 1))

        def backward_rule(g):
            return (g.transpose(0, 3, 1, 2).reshape(b, n, c),)
    else:
        data = np.ascontiguousarray(split.transpose(0, 2, 1, 3))

        def backward_rule(g):
            return (g.transpose(0, 2, 1, 3).reshape(b, n, c),)

    return node(data, (x,), backward_rule)


def merge_heads(x: Tensor, transposed: bool = False) -> Tensor:
    """Inverse of heads_view back to (B,N,C)."""
    if transposed:
        b, h, dh, n = x.shape
        data = x.data.transpose(0, 3, 1, 2).reshape(b, n, h * dh)

        def backward_rule(g):
            return (np.ascontiguousarray(g.reshape(b, n, h, dh).transpose(0, 2, 3, 1)),)
    else:
        b, h, n, dh = x.shape
        data = x.data.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

        def backward_rule(g):
            return (np.ascontiguousarray(g.reshape(b, n, h, dh).transpose(0, 2, 1, 3)),)

    return node(data, (x,), backward_rule)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return node(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def backward_rule(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return node(data, tuple(tensors), backward_rule)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward_rule(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).copy(),)

    return node(data, (a,), backward_rule)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape
    inv = 1.0 / count

    def backward_rule(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg * inv, shape).copy(),)

    return node(data, (a,), backward_rule)


def amax(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max over one or more axes; backward routes to the first argmax.

    Covers spatial max pooling (axis=(-2, -1)) and channel-wise max pooling.
    """
    axes = sorted(_axis_tuple(axis, a.ndim))
    moved = np.moveaxis(a.data, axes, range(a.ndim - len(axes), a.ndim))
    lead_shape = moved.shape[: a.ndim - len(axes)]
    flat = moved.reshape(lead_shape + (-1,))
    idx = flat.argmax(axis=-1)
    data_flat = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    data = data_flat
    if keepdims:
        for ax in axes:
            data = np.expand_dims(data, ax)

    def backward_rule(g):
        gg = g.reshape(lead_shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], gg[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.moveaxis(gmoved, range(a.ndim - len(axes), a.ndim), axes),)

    return node(data, (a,), backward_rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (max subtraction mandatory)."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_rule(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return node(data, (a,), backward_rule)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`, then affine."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if gamma.size != n or beta.size != n:
        raise ShapeError(f"layer_norm affine size {gamma.shape}/{beta.shape} does not match axis extent {n}")
    bshape = [1] * a.ndim
    bshape[ax] = n
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    x = a.data
    mu = x.mean(axis=ax, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    data = xhat * gam + bet
    need_a, need_g, need_b = a.requires_grad, gamma.requires_grad, beta.requires_grad
    reduce_axes = tuple(i for i in range(a.ndim) if i != ax)

    def backward_rule(g):
        dgamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape) if need_g else None
        dbeta = g.sum(axis=reduce_axes).reshape(beta.shape) if need_b else None
        dx = None
        if need_a:
            dxhat = g * gam
            m1 = dxhat.mean(axis=ax, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=ax, keepdims=True)
            dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return node(data, (a, gamma, beta), backward_rule)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        for p in tensor._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor the scalar `loss` depends on."""
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    running: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(order):
        g = running.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.requires_grad:
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        rule = tensor._backward
        if rule is None:
            continue
        parent_grads = rule(g)
        for p, pg in zip(tensor._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in running:
                running[key] = running[key] + pg
            else:
                running[key] = pg
