"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` sorts the recorded graph topologically and walks it in
exact reverse order.  :class:`Graph` wraps a forward function with named
inputs and parameters for callers who want the evaluate/backward split.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphStateError",
    "ShapeError",
    "Tensor",
    "Graph",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "affine",
    "sigmoid",
    "gelu",
    "softmax",
    "layer_norm",
    "concat",
    "broadcast_to",
    "mse_loss",
    "mae_loss",
    "finite_difference_check",
    "gradient_check",
]

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before evaluate)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _node(data: np.ndarray, parents: tuple, op: str, backward) -> "Tensor":
        out = Tensor(data)
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- reverse pass ------------------------------------------------------
    def backward(self, seed=None) -> list["Tensor"]:
        """Accumulate gradients into every reachable leaf; return the visit order."""
        if not self.requires_grad:
            raise GraphStateError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward(): seed required for non-scalar output {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError(f"backward(): seed shape {seed.shape} != output shape {self.shape}")

        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = seed.copy() if self.grad is None else self.grad + seed

        visited = []
        for node in reversed(order):
            visited.append(node)
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
        return visited

    # -- operators -----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes)

    def square(self):
        return _square(self)

    def abs(self):
        return _abs(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)

    def softmax(self):
        return softmax(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), "div", backward)


def _square(a: Tensor) -> Tensor:
    return Tensor._node(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def _abs(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor._node(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), "matmul", backward)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    parents: tuple = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._node(out, parents, "affine", backward)


# ---------------------------------------------------------------------------
# activations and normalisation


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * d,)

    return Tensor._node(out, (x,), "gelu", backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._node(s, (x,), "softmax", backward)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return Tensor._node(xhat, (x,), "layer_norm", backward)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: no operands")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return Tensor._node(np.concatenate([p.data for p in parts], axis=ax), parts, "concat", backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(out, dtype=np.float64), (x,), "slice", backward)


def _reduce_sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._node(np.asarray(out), (x,), "sum", backward)


def _reduce_mean(x: Tensor, axis, keepdims: bool) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return Tensor._node(np.asarray(out), (x,), "mean", backward)


def _reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return Tensor._node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def _transpose(x: Tensor, axes: tuple) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {x.ndim}-D tensor")
    inverse = tuple(np.argsort(axes))
    return Tensor._node(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def broadcast_to(x, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return Tensor._node(out, (x,), "broadcast", lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return Tensor._node(np.asarray((diff * diff).mean()), (pred, target), "mse_loss", backward)


def mae_loss(pred, target) -> Tensor:
    """Mean absolute difference; subgradient 0 at equality."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * np.sign(diff) / n
        return gp, -gp

    return Tensor._node(np.asarray(np.abs(diff).mean()), (pred, target), "mae_loss", backward)


# ---------------------------------------------------------------------------
# named-graph wrapper


class Graph:
    """A forward function over named inputs and named parameter leaves.

    ``fn(inputs, params)`` builds the computation from Tensor ops and returns
    either one Tensor or a mapping of named output Tensors.
    """

    def __init__(self, fn, params: Mapping[str, Tensor], input_names: Sequence[str] = ()):
        self.fn = fn
        self.params = dict(params)
        self.input_names = tuple(input_names)
        self.outputs: dict[str, Tensor] | None = None
        self.nodes: list[Tensor] = []

    def evaluate(self, inputs: Mapping[str, object]) -> dict[str, Tensor]:
        missing = [n for n in self.input_names if n not in inputs]
        if missing:
            raise KeyError(f"unbound graph inputs: {missing}")
        bound = {k: _as_tensor(v) for k, v in inputs.items()}
        out = self.fn(bound, self.params)
        self.outputs = {"out": out} if isinstance(out, Tensor) else dict(out)
        self.nodes = []
        return self.outputs

    def backward(self, seed=None, output: str | None = None) -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphStateError("backward() called before evaluate()")
        if output is None:
            if len(self.outputs) != 1:
                raise GraphStateError(f"choose an output among {sorted(self.outputs)}")
            output = next(iter(self.outputs))
        for p in self.params.values():
            p.grad = None
        root = self.outputs[output]
        if root.requires_grad:
            self.nodes = root.backward(seed)
        return {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


# ---------------------------------------------------------------------------
# finite-difference oracles


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)))


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0]) if value.data.size == 1 else None
    if v is None:
        raise ShapeError(f"function must be scalar-valued, got shape {value.shape}")
    if not math.isfinite(v):
        raise FloatingPointError(f"function value is not finite ({v})")
    return v


def finite_difference_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences at ``point``.

    ``function`` maps a Tensor to a scalar Tensor.  The relative error per
    coordinate is ``|analytic - numeric| / (|analytic| + 1e-12)``.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    value = function(x)
    _scalar(value)
    value.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(point)

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = _scalar(function(Tensor(point)))
        flat[i] = orig - step
        minus = _scalar(function(Tensor(point)))
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return _relative_error(analytic, numeric)


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                   step: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error of backprop against central differences.

    ``loss_fn`` takes no arguments and closes over ``params``; their ``data``
    arrays are perturbed in place and restored.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}

    errors = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = _scalar(loss_fn())
                flat[i] = orig - step
                minus = _scalar(loss_fn())
                flat[i] = orig
                numeric[i] = (plus - minus) / (2.0 * step)
            errors[name] = _relative_error(analytic[name].reshape(-1), numeric)
    return errors
