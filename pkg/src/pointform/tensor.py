"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy float64 array wrapped in a :class:`Tensor`. Operations
build a fresh computation graph per forward pass; ``backward`` replays it in
reverse topological order and accumulates gradients into ``.grad`` buffers.
Forward values are identical whether or not recording is enabled, and no
operation mutates its inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericError, ShapeError

# tanh-approximation GELU constants
_GELU_C = 0.044715
_GELU_K = math.sqrt(2.0 / math.pi)  # 0.7978845608028654

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward values are unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the differentiation graph.

    ``data`` is row-major float64. ``grad`` is lazily allocated and has the
    same shape as ``data``; repeated backward passes accumulate into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.retain_grad = requires_grad  # intermediates opt in explicitly
        self._parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def in_graph(self):
        """True when a backward pass from some root could reach this tensor."""
        return self.requires_grad or self._vjp is not None

    def item(self):
        return float(self.data)

    def numpy(self):
        """Detached copy of the value."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- operators -----------------------------------------------------

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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def backward(self, seed=None):
        backward(self, seed)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _lift(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, vjp):
    """Wrap a forward result; attach the backward rule only while recording."""
    out = Tensor(data)
    if _grad_enabled and any(p.in_graph() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def custom(data, parents, vjp):
    """Register a custom differentiable operation.

    ``vjp(out_grad)`` must return one gradient (or None) per parent, each
    matching that parent's shape.
    """
    return _make(_as_array(data), tuple(_lift(p) for p in parents), vjp)


def _sum_to_shape(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _sum_to_shape(g * b.data, a.shape),
            _sum_to_shape(g * a.data, b.shape),
        )

    return _make(out, (a, b), vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _sum_to_shape(g / b.data, a.shape),
            _sum_to_shape(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), vjp)


def power(a, exponent):
    a = _lift(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), vjp)


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a):
    a = _lift(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp)


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def gelu(a):
    """tanh-form GELU: 0.5*x*(1 + tanh(k*(x + c*x^3))), k=sqrt(2/pi), c=0.044715."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_K * x * (1.0 + _GELU_C * x2))
    half_1pt = 0.5 * (1.0 + t)
    out = x * half_1pt

    def vjp(g):
        # d/dx of k*(x + c*x^3) is k*(1 + 3c*x^2)
        dinner = _GELU_K + (3.0 * _GELU_K * _GELU_C) * x2
        dx = half_1pt + (0.5 * x) * ((1.0 - t * t) * dinner)
        return (g * dx,)

    return _make(out, (a,), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading axes are treated as a stack of matrices."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _make(out, (a, b), vjp)


def linear(x, weight, bias):
    """Affine map over the trailing axis: x @ weight + bias.

    Equivalent to ``matmul(x, weight) + bias`` but computes the weight and
    bias gradients through a single flattened product, which is much faster
    for stacked inputs.
    """
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    fan_in, fan_out = weight.shape
    if x.shape[-1] != fan_in:
        raise ShapeError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data
    x_in_graph = x.in_graph()

    def vjp(g):
        g2 = g.reshape(-1, fan_out)
        gw = x.data.reshape(-1, fan_in).T @ g2
        gb = g2.sum(axis=0)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x_in_graph else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), vjp)


# -- shape manipulation -----------------------------------------------------


def reshape(a, *shape):
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes=None):
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def swapaxes(a, axis1, axis2):
    a = _lift(a)
    out = np.swapaxes(a.data, axis1, axis2)

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def broadcast_to(a, shape):
    """Replicate along broadcast axes; used to embed shared constant tokens."""
    a = _lift(a)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_sum_to_shape(g, a.shape),)

    return _make(out, (a,), vjp)


def take(a, key):
    """Indexing/slicing (gather); backward scatter-adds into the source."""
    a = _lift(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(np.array(out, copy=True), (a,), vjp)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), vjp)


def _extreme(a, axis, keepdims, argfn):
    a = _lift(a)
    idx = argfn(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _make(out, (a,), vjp)


def tmax(a, axis, keepdims=False):
    """Max along one axis; gradient flows to the first maximizing entry."""
    return _extreme(a, axis, keepdims, np.argmax)


def tmin(a, axis, keepdims=False):
    """Min along one axis; gradient flows to the first minimizing entry."""
    return _extreme(a, axis, keepdims, np.argmin)


# -- normalization -----------------------------------------------------------


def softmax_rows(a):
    """Row softmax over the trailing axis, stabilized by max subtraction."""
    a = _lift(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def log_softmax_rows(a):
    a = _lift(a)
    if np.isnan(a.data).any():
        raise NumericError("log-softmax input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), vjp)


def layernorm(a, gamma, beta, eps=1e-5):
    """Normalize each trailing-axis row to zero mean/unit variance, then affine.

    Variance is the population form; ``eps`` sits under the square root.
    """
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match trailing axis {n}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    return _make(out, (a, gamma, beta), vjp)


# -- backward pass ------------------------------------------------------------


def _topo_from(root):
    """Operations reachable from the root, inputs before consumers."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root, seed=None):
    """Accumulate gradients of ``root`` into every reachable tensor's ``.grad``.

    ``root`` must be scalar-shaped unless a same-shape ``seed`` gradient is
    given. Calling again without clearing grads adds another pass's worth.
    """
    if not isinstance(root, Tensor):
        raise GraphError("backward root must be a Tensor")
    if not root.in_graph():
        raise GraphError("backward root is not part of an active graph")
    if seed is None:
        if root.size != 1:
            raise GraphError(
                f"backward from non-scalar shape {root.shape} requires a seed gradient"
            )
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match root {root.shape}")

    order = _topo_from(root)
    adjoint = {id(root): seed.copy()}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad or node.retain_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.in_graph():
                continue
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if prev is None else prev + pg
