"""Dense 64-bit tensors of rank at most 2 with define-by-run reverse-mode differentiation.

Operations only record themselves when a :class:`DiffGraph` is active on the
current thread and at least one operand requires a gradient. A graph is a
plain list of recorded nodes, walked once in reverse by :meth:`DiffGraph.backward`.

Reductions always sum left to right (``numpy.add.accumulate`` is sequential,
and :func:`matmul` accumulates over the inner dimension one slice at a time)
so results do not depend on the BLAS build or on the number of threads.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np

from .errors import ContractError
from .errors import DimensionError
from .errors import EmptyInputError
from .errors import LabelError
from .errors import NumericError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense array of 64-bit reals with a shape of rank 0, 1 or 2.

    Attributes
    ----------
    data : numpy.ndarray
        Row-major float64 values. Only optimizer updates replace it.
    requires_grad : bool
        Whether reverse-mode differentiation tracks this tensor.
    grad : numpy.ndarray or None
        Adjoint filled in by the last :meth:`DiffGraph.backward` this tensor took part in.

    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        """Creates a tensor from anything numpy can turn into a float64 array (values are copied)."""
        array = np.array(data, dtype=np.float64)
        if array.ndim > 2:
            raise DimensionError(f"tensors have rank at most 2, got shape {array.shape}")
        self.data = _finite(array, "Tensor")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def parameter(cls, data) -> "Tensor":
        """Creates a trainable tensor."""
        return cls(data, requires_grad=True)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the tensor."""
        return self.data.shape

    @property
    def size(self) -> int:
        """Number of scalars held."""
        return int(self.data.size)

    def item(self) -> float:
        """Returns the single value of a one-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs exactly one element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        """Short representation, values omitted."""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node(NamedTuple):
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Optional["DiffGraph"]:
    stack = _stack()
    return stack[-1] if stack else None


class DiffGraph:
    """Records differentiable operations executed while it is active on this thread.

    Use it as a context manager::

        with DiffGraph() as graph:
            loss = softmax_cross_entropy(head.forward(body.forward(x)), y)
            grads = graph.backward(loss)

    The graph is cleared after :meth:`backward` and when the block exits.
    """

    def __init__(self):
        """Creates an empty graph."""
        self._nodes: list[_Node] = []

    def __enter__(self) -> "DiffGraph":
        """Makes this graph the active one of the current thread."""
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        """Deactivates and clears the graph."""
        _stack().pop()
        self.clear()
        return False

    def __len__(self):
        """Number of recorded operations."""
        return len(self._nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        """Appends an executed operation."""
        self._nodes.append(_Node(output, inputs, backward))

    def clear(self):
        """Forgets every recorded operation."""
        self._nodes = []

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagates adjoints from the scalar ``root`` back to every leaf tensor requiring a gradient.

        Parameters
        ----------
        root : Tensor
            Scalar produced by an operation recorded on this graph.

        Returns
        -------
        Mapping of each reached leaf tensor to its gradient. The gradient is also
        stored in the leaf's ``grad`` attribute.

        Raises
        ------
        ContractError
            If the root is not a scalar or was not recorded on this graph.

        """
        if root.data.ndim != 0:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        produced = {id(node.output) for node in self._nodes}
        if id(root) not in produced:
            raise ContractError("backward root was not produced on this graph")

        adjoints: dict[int, np.ndarray] = {id(root): np.ones(())}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            adjoint = adjoints.pop(id(node.output), None)
            if adjoint is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(adjoint)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad
                if key not in produced:
                    leaves[key] = tensor

        gradients = {}
        for key, tensor in leaves.items():
            tensor.grad = _finite(adjoints[key], "backward")
            gradients[tensor] = tensor.grad
        logger.debug("backward through %d nodes reached %d leaves", len(self._nodes), len(gradients))
        self.clear()
        return gradients


@contextmanager
def no_grad():
    """Evaluates operations without recording them, even inside an active graph."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def _finite(array: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(array).all():
        raise NumericError(f"{op} produced non-finite values")
    return array


def _as_tensor(value: Union[Tensor, np.ndarray, Sequence, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(array: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    array = _finite(np.asarray(array, dtype=np.float64), op)
    graph = _active()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, tracked)
    if tracked:
        graph.record(out, inputs, backward_fn)
    return out


def _sum_leading(array: np.ndarray) -> np.ndarray:
    """Sums along the first axis strictly left to right."""
    if array.shape[0] == 0:
        return np.zeros(array.shape[1:])
    return np.add.accumulate(array, axis=0)[-1]


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one rank-1 update per inner index, i.e. the triple loop's summation order
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p])
    return out


def _require_rank(x: Tensor, rank: int, op: str):
    if x.data.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def backward_fn(g):
        return (
            _matmul(g, bv.T) if a.requires_grad else None,
            _matmul(av.T, g) if b.requires_grad else None,
        )

    return _result(_matmul(av, bv), (a, b), backward_fn, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Adds the vector ``b`` to every row of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    _require_rank(x, 2, "add_bias")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias cannot add bias {b.shape} to rows of {x.shape}")

    def backward_fn(g):
        return g, _sum_leading(g)

    return _result(x.data + b.data, (x, b), backward_fn, "add_bias")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward_fn, "relu")


def _logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    e = np.exp(z[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function."""
    x = _as_tensor(x)
    s = _logistic(x.data)

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward_fn, "sigmoid")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Places the columns of ``b`` to the right of the columns of ``a``, row by row."""
    a, b = _as_tensor(a), _as_tensor(b)
    _require_rank(a, 2, "concat_rows")
    _require_rank(b, 2, "concat_rows")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_rows needs equal row counts, got {a.shape} and {b.shape}")
    split = a.shape[1]

    def backward_fn(g):
        return g[:, :split], g[:, split:]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn, "concat_rows")


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of an m×n tensor, returned as a length-n vector."""
    x = _as_tensor(x)
    _require_rank(x, 2, "mean_rows")
    m = x.shape[0]
    if m == 0:
        raise EmptyInputError("mean_rows over zero rows")

    def backward_fn(g):
        return (np.repeat((g / m)[None, :], m, axis=0),)

    return _result(_sum_leading(x.data) / m, (x,), backward_fn, "mean_rows")


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``, stabilized by subtracting the row maximum."""
    logits = _as_tensor(logits)
    _require_rank(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,):
        raise DimensionError(f"softmax_cross_entropy got {labels.shape[0]} labels for {m} rows")
    if m == 0:
        raise EmptyInputError("softmax_cross_entropy over zero rows")
    out_of_range = (labels < 0) | (labels >= c)
    if out_of_range.any():
        raise LabelError(f"label {int(labels[out_of_range][0])} outside [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    totals = _sum_leading(exp.T)
    rows = np.arange(m)
    per_row = np.log(totals) - shifted[rows, labels]
    probs = exp / totals[:, None]

    def backward_fn(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / m),)

    return _result(_sum_leading(per_row) / m, (logits,), backward_fn, "softmax_cross_entropy")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse needs equal shapes, got {pred.shape} and {target.shape}")
    n = pred.size
    if n == 0:
        raise EmptyInputError("mse over zero elements")
    diff = pred.data - target.data

    def backward_fn(g):
        grad = g * 2.0 * diff / n
        return grad, -grad

    return _result(_sum_leading((diff * diff).reshape(-1)) / n, (pred, target), backward_fn, "mse")


def l2_distance(u: Tensor, v: Tensor) -> Tensor:
    """Euclidean norm of ``u - v``; the gradient at ``u == v`` is taken as 0."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"l2_distance needs two vectors of equal length, got {u.shape} and {v.shape}")
    diff = u.data - v.data
    norm = np.sqrt(_sum_leading(diff * diff))

    def backward_fn(g):
        if norm == 0:
            zero = np.zeros_like(diff)
            return zero, zero
        grad = g * diff / norm
        return grad, -grad

    return _result(norm, (u, v), backward_fn, "l2_distance")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of equal shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward_fn(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of equal shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward_fn(g):
        return g * bv, g * av

    return _result(av * bv, (a, b), backward_fn, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiplies every entry by a constant."""
    x = _as_tensor(x)
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), backward_fn, "scale")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every entry, as a scalar."""
    x = _as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _result(_sum_leading(x.data.reshape(-1)), (x,), backward_fn, "sum_all")


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gathers rows of ``x``; repeated indices duplicate rows."""
    x = _as_tensor(x)
    _require_rank(x, 2, "take_rows")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise DimensionError(f"take_rows index out of range for shape {x.shape}")
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result(x.data[indices], (x,), backward_fn, "take_rows")
