"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps a contiguous row-major array. Operations build a private
computation graph (each result remembers its parents and a closure that
maps the output gradient to parent gradients); `backward` walks that graph
in reverse topological order. Values are float32 in normal use; gradient
checking re-runs the same graph in float64 so central differences are
meaningful at the 1e-4 tolerance.

The op vocabulary is fixed to what the fusion pipeline needs: elementwise
add/mul, scalar scaling, matmul, transpose, relu, sigmoid, reductions, and
the layer ops registered by `emofuse.layers` and `emofuse.training` via
`make_node`. Graphs and their tensors are confined to a single thread;
there is no global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array node in a reverse-mode differentiation graph.

    grad is populated by `backward` for every tensor on the path from the
    loss to a leaf created with requires_grad=True.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        # float64 ndarrays are preserved (gradient-check mode); everything
        # else, including python lists, becomes the float32 working dtype.
        if isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> Dict[str, "Tensor"]:
        return backward(self, params)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)


def make_node(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    """Create a graph node for a custom op.

    backward_fn takes the gradient at the output and returns one gradient
    array (or None) per parent, in parent order.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast_last_axis(g: np.ndarray, target_shape: tuple) -> np.ndarray:
    # Collapse the axes an [d]-shaped operand was broadcast over.
    extra = g.ndim - len(target_shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a vector broadcast over
    leading axes (bias addition)."""
    if a.shape != b.shape:
        if not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
            raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        return g, _unbroadcast_last_axis(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        return g * b.data, g * a.data

    return make_node(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return make_node(a.data * c, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m x k] and [k x n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.ascontiguousarray(g.T),)

    return make_node(np.ascontiguousarray(a.data.T), (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (g * (a.data > 0),)

    return make_node(np.maximum(a.data, 0), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function.

    Saturated values are nudged to the nearest representable number inside
    (0, 1), so the output is strictly in the open interval for every finite
    input regardless of dtype.
    """
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, np.nextafter(x.dtype.type(1.0), x.dtype.type(0.0)), out=out)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (a,), backward_fn)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward_fn(g):
        return (np.full_like(a.data, float(np.ravel(g)[0])),)

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward_fn)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[str, Tensor]:
    """Populate grad buffers with d(loss)/d(tensor) for everything reachable
    from `loss`, and return a name -> gradient map for named parameters.

    Parameters passed in `params` that the loss does not depend on receive
    zero gradients. Raises GraphError if the loss is not a scalar.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")

    order = _toposort(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    result: Dict[str, Tensor] = {}
    for node in order:
        if not node.requires_grad:
            continue
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
        if node.name is not None and node._backward is None:
            result[node.name] = Tensor(node.grad)

    if params is not None:
        for p in params:
            if p.name is not None and p.name not in result:
                p.grad = np.zeros_like(p.data)
                result[p.name] = Tensor(p.grad)
    return result


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_relative_error: float
    per_parameter_errors: Dict[str, float] = field(default_factory=dict)
    epsilon: float = 0.0

    def __post_init__(self):
        if self.per_parameter_errors:
            worst = max(self.per_parameter_errors.values())
            assert self.max_relative_error == worst


def finite_diff_gradcheck(
    forward: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray | Tensor],
    eps: float = 1e-4,
) -> GradCheckReport:
    """Check analytic gradients of `forward` against central differences.

    `forward` must rebuild its graph from the given parameter tensors on
    every call and return a scalar loss; it is re-executed in float64 so the
    comparison is not dominated by float32 rounding. Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p64 = {
        name: Tensor(
            np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).copy(),
            requires_grad=True,
            name=name,
        )
        for name, t in params.items()
    }

    def run() -> float:
        out = forward(p64)
        value = out.item()
        if not np.isfinite(value):
            raise NumericError(f"gradcheck closure produced non-finite value {value}")
        return value

    loss = forward(p64)
    if not np.isfinite(loss.item()):
        raise NumericError("gradcheck closure produced a non-finite loss")
    analytic = backward(loss, params=p64.values())

    per_param: Dict[str, float] = {}
    for name, tensor in p64.items():
        flat = tensor.data.reshape(-1)
        ana = analytic[name].data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = run()
            flat[i] = orig - eps
            f_minus = run()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(float(ana[i])), abs(numeric), 1e-8)
            worst = max(worst, abs(float(ana[i]) - numeric) / denom)
        per_param[name] = worst

    overall = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(overall, per_param, eps)
