"""Dense tensors with reverse-mode automatic differentiation.

Every operation that participates in training records its parents and a
backward rule on the result; :func:`backward` walks the recorded graph
from a scalar loss and accumulates gradients into the leaves that were
created with ``requires_grad=True``. The tape is freed as part of the
walk, so each forward/backward pair starts from a clean graph.

Training runs in float32, verification in float64; mixed operands promote
to float64 under numpy's rules. Broadcasting follows trailing-dimension
alignment (missing leading axes and size-1 axes expand), and gradients
are summed back down to each operand's shape.
"""

import contextlib
import threading

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, DivergenceError, NumericError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# per-thread so evaluation in one worker cannot freeze training in another
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data, cut off from the graph."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1, axis2):
        return swapaxes(self, axis1, axis2)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _wrap_pair(a, b):
    """Wrap binary operands; bare Python scalars adopt the partner's dtype
    so float32 graphs are not silently promoted to float64."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        if isinstance(b, (bool, int, float)):
            return a, Tensor(np.asarray(b, dtype=a.dtype))
        return a, Tensor(b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        if isinstance(a, (bool, int, float)):
            return Tensor(np.asarray(a, dtype=b.dtype)), b
        return Tensor(a), b
    return _wrap(a), _wrap(b)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    """Elementwise division.

    In float64 (verification) a zero divisor raises immediately; in pure
    float32 (training) the IEEE result is produced and left for the
    trainer's non-finite checks to catch.
    """
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "div")
    verify = a.dtype == np.float64 or b.dtype == np.float64
    if verify and np.any(b.data == 0):
        raise NumericError("division by zero in float64 mode")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward_fn(g):
        return (-g,)

    return _make(-a.data, (a,), backward_fn)


def power(a, exponent: float) -> Tensor:
    """Raise to a fixed scalar exponent (the exponent is not a graph node)."""
    a = _wrap(a)
    p = float(exponent)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = a.data**p

    def backward_fn(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), backward_fn)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _make(data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make(data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), backward_fn)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), backward_fn)


# -- reductions ---------------------------------------------------------


def _expand_reduced(g: np.ndarray, src_shape: tuple, axis, keepdims: bool):
    if axis is None:
        return np.broadcast_to(g, src_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(src_shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, src_shape)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _make(data, (a,), backward_fn)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(data, (a,), backward_fn)


# -- linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(
                f"matmul batch dimensions differ: {a.shape} @ {b.shape}"
            ) from None
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward_fn)


# -- shape manipulation -------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward_fn)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _wrap(a)
    data = np.swapaxes(a.data, axis1, axis2)

    def backward_fn(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _make(data, (a,), backward_fn)


def getitem(a, key) -> Tensor:
    """Basic indexing (ints and slices); gradients scatter back to zeros."""
    a = _wrap(a)
    data = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(data, (a,), backward_fn)


def gather_rows(a, index) -> Tensor:
    """Pick one column per row: out[i] = a[i, index[i]]."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(index)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"gather_rows index shape {idx.shape} does not match {a.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(
            f"gather_rows index out of range for {a.shape[1]} columns"
        )
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(data, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), backward_fn)


# -- fused neural-net primitives ----------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        gy = g * data
        return (gy - data * gy.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward_fn)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp along one axis.

    The max shift is treated as a constant, which leaves the gradient
    exact because the shift cancels analytically.
    """
    a = _wrap(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"logsumexp over an empty axis in shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = exp(sub(a, Tensor(m)))
    out = add(log(tensor_sum(shifted, axis=axis, keepdims=True)), Tensor(m))
    if not keepdims:
        squeezed = tuple(s for i, s in enumerate(out.shape) if i != axis % out.ndim)
        out = reshape(out, squeezed)
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Uses the population variance (no Bessel correction).
    """
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    if not eps > 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match feature dim {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        reduce_axes = tuple(range(a.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        # classic LN gradient: remove the mean and the xhat-projection
        g_a = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return g_a, g_gain, g_bias

    return _make(data, (a, gain, bias), backward_fn)


def dropout(a, rate: float, rng: np.random.Generator = None, training: bool = False) -> Tensor:
    """Inverted dropout: zero with prob `rate`, scale survivors by 1/(1-rate)."""
    a = _wrap(a)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng stream")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    scale = keep / np.asarray(1.0 - rate, dtype=a.dtype)
    data = a.data * scale

    def backward_fn(g):
        return (g * scale,)

    return _make(data, (a,), backward_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "relu": relu,
    "gelu": gelu,
    "neg": neg,
}


def elementwise(name: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name (used by config-driven code)."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ConfigError(
            f"unknown elementwise op {name!r}; known: {sorted(_ELEMENTWISE)}"
        ) from None
    return fn(*operands)


# -- backward pass ------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss.

    Populates ``.grad`` on every reachable leaf with ``requires_grad``,
    accumulating when a leaf feeds the graph multiple times, then frees
    the tape.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise DivergenceError("backward called on a non-finite loss")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            g = g.astype(node.data.dtype, copy=False)
            g = np.broadcast_to(g, node.data.shape).copy() if g.shape != node.data.shape else g
            node.grad = g if node.grad is None else node.grad + g

    # free the tape so the next step starts from a clean graph
    for node in topo:
        node._parents = ()
        node._backward = None
