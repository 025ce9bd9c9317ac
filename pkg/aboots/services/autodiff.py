"""
This module contains a minimal reverse-mode automatic differentiation engine.

Values are float64 numpy arrays. A `Graph` is an append-only tape: every
operation records one node holding its output tensor, the ids of its inputs
and a closure that maps the output gradient to input gradients. Because a node
can only be recorded after its inputs exist, the tape is already in
topological order and `Graph.backward` just walks it in reverse.

Parameters are bound into a graph by reference (`Graph.param`), so the
embedding matrix used for input lookups and for the tied output projection is
one node with one accumulated gradient.

The neural primitives (`gru_cell`, `l2_pooling`, the temperature softmaxes)
are fused ops with hand-written backward closures; everything else in the
model is composed from the elementwise and matmul ops below.
"""

from dataclasses import dataclass
from typing import (
    TYPE_CHECKING,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from aboots.services.utils import (
    ContractError,
    EmptyInputError,
    InvalidHyperparameterError,
    ShapeError,
)

if TYPE_CHECKING:
    from aboots.services.parameters import ParameterSet

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", float, np.ndarray]


@dataclass
class Node:
    """One record on the tape."""

    op: str
    inputs: Tuple[int, ...]
    output: "Tensor"
    backward: Optional[Backward]


class Tensor:
    """A float64 array that lives on a `Graph`."""

    __slots__ = ("value", "graph", "node_id")

    def __init__(self, value: np.ndarray, graph: "Graph", node_id: int):
        self.value = value
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents of the underlying array."""
        return self.value.shape

    def item(self) -> float:
        """Returns the value of a single-element tensor as a float."""
        return float(self.value)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"


class Graph:
    """
    An append-only tape of operations.

    A graph belongs to one thread. Several graphs may bind the same
    `ParameterSet` for reading at once; parameters must not be updated while
    any of them is still in use.
    """

    def __init__(self, parameters: Optional["ParameterSet"] = None):
        self.nodes: List[Node] = []
        self.parameters = parameters
        self.gradients: Dict[int, np.ndarray] = {}
        self._bound: Dict[str, Tensor] = {}

    def record(
        self,
        op: str,
        value: np.ndarray,
        inputs: Sequence[Tensor],
        backward: Optional[Backward],
    ) -> Tensor:
        """Appends a node and returns its output tensor."""
        tensor = Tensor(np.asarray(value, dtype=np.float64), self, len(self.nodes))
        self.nodes.append(
            Node(op, tuple(item.node_id for item in inputs), tensor, backward)
        )
        return tensor

    def constant(self, value: Union[float, Sequence[float], np.ndarray]) -> Tensor:
        """Records a leaf holding a copy of `value`."""
        return self.record("constant", np.array(value, dtype=np.float64), (), None)

    def param(self, name: str) -> Tensor:
        """
        Binds a parameter as a leaf, once per graph.

        The leaf wraps the parameter array itself, not a copy.
        """
        if name not in self._bound:
            if self.parameters is None:
                raise ContractError("Graph has no parameter set to bind from")
            self._bound[name] = self.record(
                f"param:{name}", self.parameters[name], (), None
            )
        return self._bound[name]

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        Propagates d(loss) back through the tape.

        Args:
            loss: a scalar tensor recorded on this graph
        Returns:
            gradient for every entry of the bound parameter set, zeros for
            entries the loss does not reach
        Raises:
            ContractError: if the loss is not a scalar
        """
        if loss.graph is not self:
            raise ContractError("Loss was recorded on another graph")
        if loss.value.ndim != 0:
            raise ContractError(f"Loss must be a scalar, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            grad = grads.get(node.output.node_id)
            if grad is None or node.backward is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.backward(grad)):
                if input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad
        self.gradients = grads

        if self.parameters is None:
            return {}
        result: Dict[str, np.ndarray] = {}
        for name in self.parameters.names():
            bound = self._bound.get(name)
            if bound is not None and bound.node_id in grads:
                result[name] = np.array(grads[bound.node_id])
            else:
                result[name] = np.zeros_like(self.parameters[name])
        return result

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last `backward` loss w.r.t. any recorded tensor."""
        return self.gradients.get(tensor.node_id, np.zeros_like(tensor.value))


def _graph_of(*operands: Operand) -> Graph:
    for operand in operands:
        if isinstance(operand, Tensor):
            return operand.graph
    raise ContractError("At least one operand must be a Tensor")


def _lift(graph: Graph, operand: Operand) -> Tensor:
    if isinstance(operand, Tensor):
        if operand.graph is not graph:
            raise ContractError("Operands were recorded on different graphs")
        return operand
    return graph.constant(operand)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def detach(tensor: Tensor) -> Tensor:
    """Returns a constant copy; nothing flows back through it."""
    return tensor.graph.constant(tensor.value)


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    graph = _graph_of(a, b)
    left, right = _lift(graph, a), _lift(graph, b)
    return graph.record(
        "add",
        left.value + right.value,
        (left, right),
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(g, right.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    graph = _graph_of(a, b)
    left, right = _lift(graph, a), _lift(graph, b)
    return graph.record(
        "sub",
        left.value - right.value,
        (left, right),
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(-g, right.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    graph = _graph_of(a, b)
    left, right = _lift(graph, a), _lift(graph, b)
    return graph.record(
        "mul",
        left.value * right.value,
        (left, right),
        lambda g: (
            _unbroadcast(g * right.value, left.shape),
            _unbroadcast(g * left.value, right.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiplies by a Python constant."""
    return a.graph.record("scale", a.value * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a @ b` for 1-D and 2-D operands, following numpy promotion rules."""
    graph = _graph_of(a, b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        left = a.value[None, :] if a.value.ndim == 1 else a.value
        right = b.value[:, None] if b.value.ndim == 1 else b.value
        g2 = np.reshape(g, (left.shape[0], right.shape[1]))
        return (
            (g2 @ right.T).reshape(a.shape),
            (left.T @ g2).reshape(b.shape),
        )

    return graph.record("matmul", a.value @ b.value, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent."""
    out = np.tanh(a.value)
    return a.graph.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(value: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * value))


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function; exactly 0.5 at zero."""
    out = _sigmoid(a.value)
    return a.graph.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    """Elementwise exponential."""
    out = np.exp(a.value)
    return a.graph.record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Elementwise natural logarithm."""
    return a.graph.record("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamps into [low, high]; the gradient is zero where clamping happened."""
    inside = (a.value >= low) & (a.value <= high)
    return a.graph.record(
        "clip", np.clip(a.value, low, high), (a,), lambda g: (g * inside,)
    )


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar."""
    return a.graph.record(
        "sum", np.sum(a.value), (a,), lambda g: (np.full(a.shape, float(g)),)
    )


def mean(a: Tensor) -> Tensor:
    """Mean of every element, as a scalar."""
    size = a.value.size
    return a.graph.record(
        "mean", np.mean(a.value), (a,), lambda g: (np.full(a.shape, float(g) / size),)
    )


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Joins tensors along their first axis."""
    if not tensors:
        raise EmptyInputError("concat needs at least one tensor")
    graph = _graph_of(*tensors)
    bounds = np.cumsum([item.shape[0] for item in tensors])[:-1]
    return graph.record(
        "concat",
        np.concatenate([item.value for item in tensors]),
        tensors,
        lambda g: np.split(g, bounds),
    )


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stacks equally shaped tensors along a new first axis."""
    if not tensors:
        raise EmptyInputError("stack needs at least one tensor")
    shapes = {item.shape for item in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    graph = _graph_of(*tensors)
    return graph.record(
        "stack",
        np.stack([item.value for item in tensors]),
        tensors,
        lambda g: list(g),
    )


def index(a: Tensor, position: int) -> Tensor:
    """Selects `a[position]` along the first axis."""

    def backward(g: np.ndarray):
        grad = np.zeros_like(a.value)
        grad[position] = g
        return (grad,)

    return a.graph.record("index", a.value[position], (a,), backward)


def column(matrix: Tensor, position: int) -> Tensor:
    """Selects column `position` of a 2-D tensor (embedding lookup)."""

    def backward(g: np.ndarray):
        grad = np.zeros_like(matrix.value)
        grad[:, position] = g
        return (grad,)

    return matrix.graph.record(
        "column", matrix.value[:, position], (matrix,), backward
    )


def _check_temperature(temperature: float):
    if not temperature > 0:
        raise InvalidHyperparameterError(
            f"Temperature must be positive, got {temperature}"
        )


def softmax_probabilities(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Plain numpy softmax(logits / temperature) for code that needs no gradient."""
    _check_temperature(temperature)
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    shifted = np.exp(scaled - np.max(scaled))
    return shifted / np.sum(shifted)


def softmax_with_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """
    softmax(logits / temperature) over a vector.

    Raises:
        InvalidHyperparameterError: if temperature <= 0
    """
    out = softmax_probabilities(logits.value, temperature)

    def backward(g: np.ndarray):
        return (out * (g - np.dot(g, out)) / temperature,)

    return logits.graph.record("softmax", out, (logits,), backward)


def log_softmax_with_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """log softmax(logits / temperature) over a vector, computed stably."""
    _check_temperature(temperature)
    scaled = logits.value / temperature
    peak = np.max(scaled)
    log_norm = peak + np.log(np.sum(np.exp(scaled - peak)))
    out = scaled - log_norm

    def backward(g: np.ndarray):
        return ((g - np.exp(out) * np.sum(g)) / temperature,)

    return logits.graph.record("log_softmax", out, (logits,), backward)


def l2_pooling(sequence: Sequence[Tensor]) -> Tensor:
    """
    Element-wise root-mean-square over time.

    out_d = sqrt(mean_j v_jd^2); the sign of the inputs is lost.

    Raises:
        EmptyInputError: for an empty sequence
        ShapeError: if the vectors differ in size
    """
    if not sequence:
        raise EmptyInputError("L2 pooling needs at least one vector")
    stacked = stack(sequence)
    values = stacked.value
    steps = values.shape[0]
    out = np.sqrt(np.mean(values * values, axis=0))

    def backward(g: np.ndarray):
        safe = np.where(out > 0, out, 1.0)
        grad = values * (g / (steps * safe))
        return (np.where(out > 0, grad, 0.0),)

    return stacked.graph.record("l2_pool", out, (stacked,), backward)


def gru_cell(
    x: Tensor, h_prev: Tensor, w: Tensor, u: Tensor, b: Tensor
) -> Tensor:
    """
    One GRU step.

    With `[z, r, n]` blocks of the gate pre-activations:
        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r * h) U_n + b_n)
        h' = z * h + (1 - z) * n

    Args:
        x: input vector (n_in)
        h_prev: previous state (h)
        w: input weights (n_in, 3h)
        u: recurrent weights (h, 3h)
        b: bias (3h)
    Raises:
        ShapeError: if any extent disagrees
    """
    size = h_prev.shape[0] if h_prev.value.ndim == 1 else -1
    if (
        size < 1
        or x.value.ndim != 1
        or w.shape != (x.shape[0], 3 * size)
        or u.shape != (size, 3 * size)
        or b.shape != (3 * size,)
    ):
        raise ShapeError(
            f"GRU shapes disagree: x{x.shape} h{h_prev.shape} "
            f"W{w.shape} U{u.shape} b{b.shape}"
        )

    xv, hv, wv, uv = x.value, h_prev.value, w.value, u.value
    pre = xv @ wv + b.value
    u_zr = uv[:, : 2 * size]
    u_n = uv[:, 2 * size :]
    zr = _sigmoid(pre[: 2 * size] + hv @ u_zr)
    z, r = zr[:size], zr[size:]
    rh = r * hv
    n = np.tanh(pre[2 * size :] + rh @ u_n)
    out = z * hv + (1.0 - z) * n

    def backward(g: np.ndarray):
        dz = g * (hv - n)
        dpre_n = g * (1.0 - z) * (1.0 - n * n)
        d_rh = dpre_n @ u_n.T
        dpre_z = dz * z * (1.0 - z)
        dpre_r = d_rh * hv * r * (1.0 - r)
        dpre_zr = np.concatenate([dpre_z, dpre_r])
        dpre = np.concatenate([dpre_zr, dpre_n])
        dh = g * z + d_rh * r + dpre_zr @ u_zr.T
        du = np.concatenate([np.outer(hv, dpre_zr), np.outer(rh, dpre_n)], axis=1)
        return (dpre @ wv.T, dh, np.outer(xv, dpre), du, dpre)

    return x.graph.record("gru_cell", out, (x, h_prev, w, u, b), backward)
