"""
Reverse-mode automatic differentiation over small tensor graphs.

Graphs are built eagerly: every operation computes its value immediately and
records its parents together with a vector-Jacobian product. The products are
written with the same graph operations, so a gradient taken with
``create_graph=True`` is itself a graph and can be differentiated again. This
is what lets the attack differentiate a quantity that already contains a
parameter gradient.

All arithmetic is 64-bit. Broadcasting is limited to one operand holding a
single element.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphError, NumericalError, ShapeError, ValidationError

ArrayLike = Union[float, int, Sequence[float], np.ndarray]
VJP = Callable[["Node", "Node"], Sequence[Optional["Node"]]]

# magnitude below which gradient entries are compared absolutely
RELATIVE_FLOOR = 1e-4

_GRAPH_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "graph_enabled", default=True
)


class Tensor:
    """
    Immutable 64-bit array with a fixed shape.

    Args:
        data (ArrayLike): Values, nested or flat
        shape (Optional[Sequence[int]]): Target shape; the data is reshaped
            row-major when given
    """

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike, shape: Optional[Sequence[int]] = None):
        array = np.array(data, dtype=np.float64)
        if shape is not None:
            dims = tuple(int(d) for d in shape)
            if array.size != int(np.prod(dims, dtype=np.int64)):
                raise ShapeError("tensor", array.shape, dims)
            array = array.reshape(dims)
        array.flags.writeable = False
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an array without copying it."""
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if array.flags.writeable:
            array = array.copy()
            array.flags.writeable = False
        tensor._data = array
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape)))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape, (1,))
        return float(self._data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def to_text(self, per_line: int = 6) -> str:
        """
        Serialise as ``tensor <rank> <d1> ... <dk>`` followed by row-major values.

        Values carry 17 significant digits, enough to round-trip a double.
        """
        header = " ".join(["tensor", str(len(self.shape))] + [str(d) for d in self.shape])
        flat = [format(float(v), ".17g") for v in self._data.reshape(-1)]
        lines = [header]
        for start in range(0, len(flat), per_line):
            lines.append(" ".join(flat[start:start + per_line]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Tensor":
        tokens = text.split()
        if len(tokens) < 2 or tokens[0] != "tensor":
            raise ValidationError("text tensor must start with 'tensor <rank>'")
        rank = int(tokens[1])
        dims = [int(d) for d in tokens[2:2 + rank]]
        values = [float(v) for v in tokens[2 + rank:]]
        if any(d <= 0 for d in dims):
            raise ValidationError(f"text tensor has non-positive dimension in {dims}")
        expected = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if len(values) != expected:
            raise ValidationError(
                f"text tensor declares {expected} values but holds {len(values)}"
            )
        return cls(values, shape=dims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._data.tolist()})"


class Node:
    """
    A vertex of a computation graph.

    Leaves have no parents. Interior nodes keep their parents and the
    vector-Jacobian product used by :func:`backward`.
    """

    __slots__ = ("value", "parents", "op", "vjp", "name")

    def __init__(
        self,
        value: Tensor,
        parents: Tuple["Node", ...] = (),
        op: str = "leaf",
        vjp: Optional[VJP] = None,
        name: Optional[str] = None,
    ):
        self.value = value
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __add__(self, other: Union["Node", float]) -> "Node":
        return add(self, other)

    def __radd__(self, other: float) -> "Node":
        return add(other, self)

    def __sub__(self, other: Union["Node", float]) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: float) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Union["Node", float]) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: float) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Union["Node", float]) -> "Node":
        return div(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Node(op={self.op}{label}, shape={self.shape})"


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build values only; operations inside record no parents."""
    token = _GRAPH_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAPH_ENABLED.reset(token)


def leaf(data: Union[ArrayLike, Tensor], name: Optional[str] = None) -> Node:
    """Create a graph input."""
    value = data if isinstance(data, Tensor) else Tensor(data)
    return Node(value, name=name)


constant = leaf


def as_node(x: Union[Node, Tensor, ArrayLike]) -> Node:
    if isinstance(x, Node):
        return x
    return leaf(x)


def _make(array: np.ndarray, parents: Sequence[Node], op: str, vjp: VJP) -> Node:
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"operation '{op}' produced non-finite values")
    value = Tensor.wrap(array)
    if not _GRAPH_ENABLED.get():
        return Node(value, op=op)
    return Node(value, parents=tuple(parents), op=op, vjp=vjp)


def _check_binary(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(grad: Node, target: Node) -> Node:
    """Fold a gradient back onto a single-element operand."""
    if grad.shape == target.shape:
        return grad
    return reshape(reduce_sum(grad), target.shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a: Union[Node, float], b: Union[Node, float]) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("add", a, b)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), "add", vjp)


def sub(a: Union[Node, float], b: Union[Node, float]) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("sub", a, b)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return _unbroadcast(g, a), _unbroadcast(scale(g, -1.0), b)

    return _make(a.data - b.data, (a, b), "sub", vjp)


def mul(a: Union[Node, float], b: Union[Node, float]) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("mul", a, b)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return _unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)

    return _make(a.data * b.data, (a, b), "mul", vjp)


def div(a: Union[Node, float], b: Union[Node, float]) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("div", a, b)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        grad_a = div(g, b)
        grad_b = scale(div(mul(g, out), b), -1.0)
        return _unbroadcast(grad_a, a), _unbroadcast(grad_b, b)

    return _make(a.data / b.data, (a, b), "div", vjp)


def scale(a: Node, factor: float) -> Node:
    """Multiply by a Python scalar."""
    factor = float(factor)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (scale(g, factor),)

    return _make(a.data * factor, (a,), "scale", vjp)


def square(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, scale(a, 2.0)),)

    return _make(a.data * a.data, (a,), "square", vjp)


def sqrt(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (div(g, scale(out, 2.0)),)

    return _make(np.sqrt(a.data), (a,), "sqrt", vjp)


def exp(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, out),)

    return _make(np.exp(a.data), (a,), "exp", vjp)


def log(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (div(g, a),)

    return _make(np.log(a.data), (a,), "log", vjp)


# -- activations ------------------------------------------------------------


def _step_mask(a: Node) -> Node:
    # relu'(0) = 0
    return constant(Tensor.wrap((a.data > 0).astype(np.float64)))


def relu(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, _step_mask(a)),)

    return _make(np.maximum(a.data, 0.0), (a,), "relu", vjp)


def _logistic(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    shifted = np.exp(values[~positive])
    out[~positive] = shifted / (1.0 + shifted)
    return out


def sigmoid(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, mul(out, sub(1.0, out))),)

    return _make(_logistic(a.data), (a,), "sigmoid", vjp)


def silu(a: Node) -> Node:
    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        s = sigmoid(a)
        slope = add(s, mul(a, mul(s, sub(1.0, s))))
        return (mul(g, slope),)

    return _make(a.data * _logistic(a.data), (a,), "silu", vjp)


# -- reductions -------------------------------------------------------------


def reduce_sum(a: Node) -> Node:
    """Sum of all entries, as a rank-0 node."""

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(constant(Tensor.wrap(np.ones(a.shape))), g),)

    return _make(np.sum(a.data), (a,), "sum", vjp)


def reduce_mean(a: Node) -> Node:
    return scale(reduce_sum(a), 1.0 / a.size)


def l2_norm(a: Node) -> Node:
    """Euclidean norm of all entries; the gradient at the origin is zero."""

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        if out.data == 0.0:
            return (constant(Tensor.zeros(a.shape)),)
        return (mul(div(a, out), g),)

    return _make(np.sqrt(np.sum(a.data * a.data)), (a,), "l2_norm", vjp)


def softmax(a: Node) -> Node:
    """Softmax over a 1-D vector."""
    if len(a.shape) != 1:
        raise ShapeError("softmax", a.shape)
    shifted = np.exp(a.data - np.max(a.data))
    probabilities = shifted / np.sum(shifted)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        centred = sub(g, reduce_sum(mul(g, out)))
        return (mul(out, centred),)

    return _make(probabilities, (a,), "softmax", vjp)


def softmax_cross_entropy(logits: Node, label: int) -> Node:
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    if len(logits.shape) != 1:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    if not 0 <= int(label) < logits.shape[0]:
        raise ValidationError(
            f"label {label} out of range for {logits.shape[0]} logits"
        )
    z = logits.data
    top = np.max(z)
    log_partition = top + math.log(float(np.sum(np.exp(z - top))))
    onehot = np.zeros(z.shape)
    onehot[int(label)] = 1.0

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        residual = sub(softmax(logits), constant(Tensor.wrap(onehot)))
        return (mul(residual, g),)

    return _make(log_partition - z[int(label)], (logits,), "softmax_cross_entropy", vjp)


# -- linear algebra and layout ----------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    """Matrix product of a 2-D node with a 1-D or 2-D node."""
    if len(a.shape) != 2 or len(b.shape) not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    if len(b.shape) == 1:

        def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
            grad_a = matmul(reshape(g, (a.shape[0], 1)), reshape(b, (1, b.shape[0])))
            grad_b = matmul(transpose(a), g)
            return grad_a, grad_b

    else:

        def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
            return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), "matmul", vjp)


def transpose(a: Node) -> Node:
    if len(a.shape) != 2:
        raise ShapeError("transpose", a.shape)

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (transpose(g),)

    return _make(a.data.T, (a,), "transpose", vjp)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    dims = tuple(int(d) for d in shape)
    if int(np.prod(dims, dtype=np.int64)) != a.size:
        raise ShapeError("reshape", a.shape, dims)
    original = a.shape

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (reshape(g, original),)

    return _make(a.data.reshape(dims), (a,), "reshape", vjp)


def concat(parts: Sequence[Node]) -> Node:
    """Concatenate along the first axis."""
    if not parts:
        raise ShapeError("concat")
    nodes = [as_node(p) for p in parts]
    tails = {n.shape[1:] for n in nodes}
    if len(tails) != 1 or any(len(n.shape) == 0 for n in nodes):
        raise ShapeError("concat", *[n.shape for n in nodes])
    values = np.concatenate([n.data for n in nodes], axis=0)
    offsets = np.cumsum([0] + [n.size for n in nodes])

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        grads = []
        for node, start in zip(nodes, offsets[:-1]):
            index = np.arange(start, start + node.size).reshape(node.shape)
            grads.append(take(g, index))
        return grads

    return _make(values, nodes, "concat", vjp)


def take(a: Node, index: np.ndarray) -> Node:
    """
    Gather entries of ``a`` by flat row-major index.

    The output has the shape of ``index``. Repeated indices are allowed and
    their gradients accumulate.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.size):
        raise ShapeError("take", a.shape, index.shape)
    source_shape = a.shape

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (scatter_add(g, index, source_shape),)

    return _make(a.data.reshape(-1)[index], (a,), "take", vjp)


def scatter_add(a: Node, index: np.ndarray, shape: Sequence[int]) -> Node:
    """Adjoint of :func:`take`: accumulate ``a`` into a zero tensor of ``shape``."""
    index = np.asarray(index, dtype=np.int64)
    dims = tuple(shape)
    if index.shape != a.shape:
        raise ShapeError("scatter_add", a.shape, index.shape)
    flat = np.zeros(int(np.prod(dims, dtype=np.int64)))
    np.add.at(flat, index.reshape(-1), a.data.reshape(-1))

    def vjp(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (take(g, index),)

    return _make(flat.reshape(dims), (a,), "scatter_add", vjp)


def repeat_rows(vector: Node, rows: int) -> Node:
    """Stack ``rows`` copies of a 1-D vector into a 2-D node."""
    if len(vector.shape) != 1:
        raise ShapeError("repeat_rows", vector.shape)
    index = np.tile(np.arange(vector.shape[0]), (rows, 1))
    return take(vector, index)


# -- evaluation and differentiation -----------------------------------------


def evaluate(root: Node) -> Tensor:
    """
    Forward value of a graph.

    Values are computed when the graph is built, so this only confirms the
    result is finite and returns it.
    """
    if not root.value.is_finite():
        raise NumericalError(f"graph root '{root.op}' holds non-finite values")
    return root.value


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(
    root: Node, wrt: Sequence[Node], create_graph: bool = False
) -> List[Union[Node, Tensor]]:
    """
    Gradients of a scalar root with respect to ``wrt``.

    Args:
        root (Node): Scalar node (rank 0 or a single element)
        wrt (Sequence[Node]): Leaves or intermediates of the graph
        create_graph (bool, optional): Return gradient nodes that can be
            differentiated again. Defaults to False (returns Tensors).

    Returns:
        List[Union[Node, Tensor]]: One gradient per target, in order. A target
        with no path to the root gets an exactly-zero gradient.

    Raises:
        GraphError: If the root holds more than one element
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    targets = {id(node) for node in wrt}
    relevant = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    adjoints: Dict[int, Node] = {}
    context = contextlib.nullcontext() if create_graph else no_grad()
    with context:
        adjoints[id(root)] = constant(Tensor.wrap(np.ones(root.shape)))
        for node in reversed(order):
            grad = adjoints.get(id(node))
            if grad is None or node.vjp is None:
                continue
            if not any(id(p) in relevant for p in node.parents):
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(grad, node)):
                if parent_grad is None or id(parent) not in relevant:
                    continue
                previous = adjoints.get(id(parent))
                adjoints[id(parent)] = (
                    parent_grad if previous is None else add(previous, parent_grad)
                )

    results: List[Union[Node, Tensor]] = []
    for node in wrt:
        grad = adjoints.get(id(node))
        if grad is None:
            grad = constant(Tensor.zeros(node.shape))
        elif grad.shape != node.shape:
            grad = reshape(grad, node.shape)
        results.append(grad if create_graph else grad.value)
    return results


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float], point: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    base = np.array(point, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = fn(base)
        flat[i] = original - eps
        lower = fn(base)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, defined as 0 when both vanish."""
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)) / scale_)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    """
    Largest entrywise ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.

    Entries smaller than ``floor`` in both arrays are compared absolutely.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ShapeError("max_relative_error", a.shape, n.shape)
    if a.size == 0:
        return 0.0
    scale_ = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale_))


def grad_check(
    f: Callable[[Node], Node], point: Union[Tensor, ArrayLike], eps: float = 1e-5
) -> float:
    """
    Compare the backward gradient of ``f`` with central finite differences.

    Args:
        f (Callable[[Node], Node]): Builds a scalar graph from its input node
        point (Union[Tensor, ArrayLike]): Where to evaluate
        eps (float, optional): Finite-difference step in (0, 1e-2]. Defaults to 1e-5.

    Returns:
        float: Largest entrywise relative error between the two gradients
    """
    if not 0.0 < eps <= 1e-2:
        raise ValidationError(f"eps must lie in (0, 1e-2], got {eps}")
    start = point if isinstance(point, Tensor) else Tensor(point)
    x = leaf(start)
    out = f(x)
    if out.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    (analytic,) = backward(out, [x])

    def value_at(array: np.ndarray) -> float:
        # f may take gradients internally, so the graph stays enabled
        return evaluate(f(leaf(array))).item()

    numeric = finite_difference_gradient(value_at, start.numpy(), eps)
    return max_relative_error(analytic.data, numeric)
