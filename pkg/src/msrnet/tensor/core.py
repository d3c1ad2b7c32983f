"""Graph-recording tensor type and reverse-mode propagation."""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DiffTensor:
    """A float64 ``(batch, channels, height, width)`` array with an optional
    recorded history of the operations that produced it.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Non-leaf nodes only keep a reference to their parents
    while the graph is alive; :func:`backward` releases it.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name",
                 "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 parents: Sequence["DiffTensor"] = (), backward: BackwardFn | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"DiffTensor needs 4 dims (N, C, H, W), got shape {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the functional forms in ``ops`` are the primary API.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.scale(other, self) if _is_scalar_like(other) else ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)


class LearnableScalar(DiffTensor):
    """A single learnable coefficient stored as a ``(1, 1, 1, 1)`` tensor."""

    __slots__ = ()

    def __init__(self, value: float = 1.0, requires_grad: bool = True, name: str | None = None):
        super().__init__(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad, name=name)

    @property
    def value(self) -> float:
        return float(self.values[0, 0, 0, 0])

    @property
    def gradient(self) -> float:
        return 0.0 if self.grad is None else float(self.grad[0, 0, 0, 0])


def _is_scalar_like(obj) -> bool:
    return isinstance(obj, (int, float, np.floating, LearnableScalar))


def tensor(values, requires_grad: bool = False, name: str | None = None) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad, name=name)


def make_node(values: np.ndarray, parents: Sequence[DiffTensor], backward: BackwardFn) -> DiffTensor:
    """Create an op output; the history is recorded only if some parent needs it."""
    if any(p.requires_grad for p in parents):
        return DiffTensor(values, requires_grad=True, parents=parents, backward=backward)
    return DiffTensor(values)


def _topological_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffTensor, retain_graph: bool = False) -> None:
    """Propagate d(loss)/d(node) to every leaf that requires grad.

    Leaf gradients accumulate into ``.grad``. The recorded graph is freed
    afterwards unless ``retain_graph`` is set.
    """
    if loss.values.shape != (1, 1, 1, 1):
        raise ValueError(f"backward() needs a scalar (1, 1, 1, 1) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.values.shape:
                raise RuntimeError(
                    f"gradient shape {pg.shape} does not match input shape {parent.values.shape}")
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
