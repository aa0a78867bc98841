"""Array-level reverse-mode differentiation.

Every operation on a :class:`Tensor` that depends on a differentiable input
records a node (parents plus a vector-Jacobian closure). :func:`backward`
orders the recorded nodes topologically and replays them in reverse, which
makes each loss evaluation its own tape.

Broadcasting is limited to what the losses in this package need: scalars
against arrays and ``(n, 1)`` columns against ``(n, k)`` blocks.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """A float64 array that may carry a recorded gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    # numpy defers binary operators to Tensor
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
        op: str = "",
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
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

    def __pow__(self, exponent: float):
        if exponent == 2:
            return square(self)
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x) -> Tensor:
    """Detach ``x``: the result has the same value but blocks all gradient flow."""
    return Tensor(as_tensor(x).data.copy())


sg = stop_gradient


def _node(data, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * out / bd, bd.shape),
        ),
        "div",
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
        "minimum",
    )


# elementwise unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(
        ad**exponent, (a,), lambda g: (exponent * ad ** (exponent - 1) * g,), "pow"
    )


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_np(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    ad = a.data
    return _node(softplus_np(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def tile_rows(a, k: int) -> Tensor:
    """Stack ``k`` copies of a 2-D tensor along axis 0."""
    a = as_tensor(a)
    n = a.shape[0]
    return _node(
        np.tile(a.data, (k, 1)),
        (a,),
        lambda g: (g.reshape(k, n, *a.shape[1:]).sum(axis=0),),
        "tile_rows",
    )


# fused dense stack


_MLP_DTYPE = np.float64


def set_mlp_precision(dtype) -> None:
    """Arithmetic precision inside :func:`mlp_apply` (float64 or float32).

    Inputs, outputs and gradients stay float64 either way; float32 only
    changes the internal matrix products, roughly halving their cost.
    """
    global _MLP_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float64, np.float32):
        raise ValueError(f"unsupported precision {dt}")
    _MLP_DTYPE = dt.type


def get_mlp_precision():
    return _MLP_DTYPE


def mlp_apply(params, x, layout: Sequence[tuple[int, int]]) -> Tensor:
    """Dense ReLU stack over a flat parameter vector.

    ``layout`` lists ``(fan_in, fan_out)`` per layer. Each layer stores its
    weight matrix row-major followed by its bias. ReLU follows every layer
    except the last; the result is the final pre-activation.
    """
    params, x = as_tensor(params), as_tensor(x)
    dt = _MLP_DTYPE
    theta = params.data.astype(dt, copy=False)
    h = x.data.astype(dt, copy=False)
    acts = [h]
    weights = []
    pos = 0
    last = len(layout) - 1
    for i, (fi, fo) in enumerate(layout):
        W = theta[pos : pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        bias = theta[pos : pos + fo]
        pos += fo
        weights.append(W)
        h = h @ W + bias
        if i < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, layout needs {pos}")

    need_p, need_x = params.requires_grad, x.requires_grad

    def vjp(g):
        g = g.astype(dt, copy=False)
        gp = np.empty(theta.size) if need_p else None
        end = theta.size
        for i in range(last, -1, -1):
            fi, fo = layout[i]
            a_in = acts[i]
            if need_p:
                gp[end - fo : end] = g.sum(axis=0)
                end -= fo
                gp[end - fi * fo : end] = (a_in.T @ g).ravel()
                end -= fi * fo
            if i > 0 or need_x:
                g = g @ weights[i].T
                if i > 0:
                    g = g * (a_in > 0)
        return gp, (g.astype(np.float64, copy=False) if need_x else None)

    return _node(h.astype(np.float64, copy=False), (params, x), vjp, "mlp")


# graph traversal


def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every differentiable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Leaves that the loss does not depend on get a zero array.
    """
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def param(data) -> Tensor:
    """A differentiable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
