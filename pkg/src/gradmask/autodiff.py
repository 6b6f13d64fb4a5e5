"""Dense tensors with reverse-mode differentiation.

Every backward rule is written in terms of differentiable tensor ops, so a
backward pass run with ``create_graph=True`` is itself recorded on the tape
and can be differentiated again. That is what the gradient-matching attack
needs: parameter gradients as a differentiable function of the input.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(flag)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """An n-dimensional array plus the bookkeeping needed to backpropagate."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection ----------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self, tuple(reversed(range(self.ndim))))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# elementwise and broadcasting
# ---------------------------------------------------------------------------

def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = a.shape

    def backward(g):
        return (broadcast_to(g, src),)

    return _make(data, (a,), backward, "sum_to")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = np.broadcast_to(a.data, shape)
    src = a.shape

    def backward(g):
        return (sum_to(g, src),)

    return _make(data, (a,), backward, "broadcast_to")


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (neg(g),)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return mul(a, reciprocal(b))


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g):
        return (neg(mul(g, mul(out, out))),)

    out = _make(out_data, (a,), backward, "reciprocal")
    return out


def rsqrt(a: Tensor) -> Tensor:
    """``1 / sqrt(a)``."""
    out_data = 1.0 / np.sqrt(a.data)

    def backward(g):
        return (mul(g, mul(mul(out, mul(out, out)), -0.5)),)

    out = _make(out_data, (a,), backward, "rsqrt")
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (mul(g, out),)

    out = _make(out_data, (a,), backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), backward, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        # derivative of the mask is zero almost everywhere
        return (mul(g, Tensor(mask.astype(g.dtype))),)

    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), backward, "relu")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _normalize_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _lift(a)
    src = a.shape
    data = a.data.reshape(shape)
    if data.shape == src:
        return a

    def backward(g):
        return (reshape(g, src),)

    return _make(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inv),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, b.T) if a.requires_grad else None
        gb = matmul(a.T, g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution support: im2col and its adjoint are a closed linear pair
# ---------------------------------------------------------------------------

def im2col(x: Tensor, k: int, pad: int) -> Tensor:
    src = x.shape

    def backward(g):
        return (col2im(g, src, k, pad),)

    return _make(_kernels.im2col(x.data, k, pad), (x,), backward, "im2col")


def col2im(cols: Tensor, shape: tuple, k: int, pad: int) -> Tensor:
    def backward(g):
        return (im2col(g, k, pad),)

    return _make(_kernels.col2im(cols.data, shape, k, pad), (cols,), backward, "col2im")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, pad: int) -> Tensor:
    """Stride-1 cross-correlation. ``x``: (N, C, H, W); ``weight``: (F, C, k, k)."""
    n, _, h, w = x.shape
    f, c, k, _ = weight.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = im2col(x, k, pad)
    out = matmul(reshape(weight, (f, c * k * k)), cols)
    out = transpose(reshape(out, (f, n, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return mean(reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = mul(g, s)
        return (add(gs, neg(mul(s, sum_(gs, axis, keepdims=True)))),)

    s = _make(s_data, (z,), backward, "softmax")
    return s


def logsumexp(z: Tensor, axis: int = -1) -> Tensor:
    m = z.data.max(axis=axis, keepdims=True)
    data = (m + np.log(np.exp(z.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    kept = tuple(1 if i == axis % z.ndim else s for i, s in enumerate(z.shape))

    def backward(g):
        return (mul(broadcast_to(reshape(g, kept), z.shape), softmax(z, axis)),)

    return _make(data, (z,), backward, "logsumexp")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of ``logits`` (N, K) against a target distribution.

    ``target`` is an (N, K) tensor of class probabilities (one-hot rows for
    hard labels). Fused and log-sum-exp stabilised.
    """
    target = _lift(target, logits)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    z = logits.data
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    loss = np.asarray(np.sum(lse - np.sum(target.data * z, axis=1)) / n, dtype=z.dtype)

    def backward(g):
        scale = mul(g, 1.0 / n)
        gz = mul(add(softmax(logits, axis=1), neg(target)), scale) if logits.requires_grad else None
        gt = mul(neg(logits), scale) if target.requires_grad else None
        return gz, gt

    return _make(loss, (logits, target), backward, "softmax_ce")


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given. Inputs that
    ``output`` does not depend on get zero gradients. With
    ``create_graph=True`` the returned tensors are themselves differentiable.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("every tensor in `inputs` must require grad")
    if grad_output is None:
        if output.shape != ():
            raise ValueError(f"grad of non-scalar output with shape {output.shape}")
        grad_output = Tensor(np.ones((), dtype=output.dtype))
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]

    grads: dict[int, Tensor] = {id(output): grad_output}
    with set_grad_enabled(create_graph):
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out
