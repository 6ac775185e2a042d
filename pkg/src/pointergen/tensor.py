"""Dense tensors with reverse-mode differentiation.

Every layer downstream (attention blocks, the encoder/decoder stacks,
the pointer-generator head, the losses) is composed from the operations
in this module.  Values are numpy float64 arrays throughout so that
analytic gradients can be checked against central finite differences at
tight tolerances.

Each operation records its inputs and a closure that maps the output
gradient to input gradient contributions.  ``backward`` replays the
recorded operations in reverse topological order exactly once per node.
Tensors are single-writer: do not mutate ``values`` of a recorded graph
or run ``backward`` concurrently from multiple threads.  Parameter
tensors may be read by any number of threads once training is done.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# Probabilities are floored here before any log so downstream losses and
# decode scores stay finite even on exactly-zero entries.
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row had no unmasked entries left to normalize over."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    ``grad`` holds the accumulated gradient and always has the same
    shape as ``values`` once populated.  It starts out as ``None``
    (meaning zero) and is only materialized when a backward pass
    reaches the tensor.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _make(values: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = False
    out.grad = None
    if _grad_enabled and any(_needs(p) for p in parents):
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Never mutate in place: grads may alias arrays still referenced by
    # other closures.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


class Graph:
    """Topologically ordered record of the operations reaching a root.

    ``nodes`` lists every tensor reachable from the root through
    recorded operations, leaves first, root last.  Replaying it in
    reverse visits each recorded operation exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
        seen.add(id(root))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` for every reachable tensor."""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        if _needs(a):
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if _needs(b):
            _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(values, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        if _needs(a):
            _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        if _needs(b):
            _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(values, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        _accumulate(x, g * c)

    return _make(x.values * c, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    values = av @ bv

    def backward_fn(g):
        if _needs(a):
            _accumulate(a, g @ bv.T)
        if _needs(b):
            _accumulate(b, av.T @ g)

    return _make(values, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def backward_fn(g):
        _accumulate(x, g.T)

    return _make(x.values.T, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    values = np.maximum(x.values, 0.0)

    def backward_fn(g):
        _accumulate(x, g * (x.values > 0.0))

    return _make(values, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    values = np.log(x.values)

    def backward_fn(g):
        _accumulate(x, g / x.values)

    return _make(values, (x,), backward_fn)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    values = np.maximum(x.values, floor)

    def backward_fn(g):
        _accumulate(x, g * (x.values > floor))

    return _make(values, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    values = np.asarray(x.values.sum())

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.values.shape).astype(np.float64, copy=False))

    return _make(values, (x,), backward_fn)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: (m, n) -> (1, n)."""
    if x.values.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {x.shape}")
    m = x.values.shape[0]
    values = x.values.mean(axis=0, keepdims=True)

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g / m, x.values.shape).copy())

    return _make(values, (x,), backward_fn)


def repeat_rows(x: Tensor, count: int) -> Tensor:
    """Tile a single row: (1, n) -> (count, n)."""
    if x.values.ndim != 2 or x.values.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects shape (1, n), got {x.shape}")
    values = np.broadcast_to(x.values, (count, x.values.shape[1])).copy()

    def backward_fn(g):
        _accumulate(x, g.sum(axis=0, keepdims=True))

    return _make(values, (x,), backward_fn)


# ---------------------------------------------------------------------------
# structural ops


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got shape {x.shape}")
    if not (0 <= start < stop <= x.values.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {x.shape}")
    values = x.values[:, start:stop]

    def backward_fn(g):
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _make(values, (x,), backward_fn)


def gather_cols(x: Tensor, cols: Sequence[int]) -> Tensor:
    """Select an arbitrary subset of columns, keeping their given order."""
    idx = np.asarray(cols, dtype=np.int64)
    if x.values.ndim != 2:
        raise ShapeError(f"gather_cols expects a matrix, got shape {x.shape}")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.values.shape[1]:
        raise ShapeError(f"gather_cols: columns {cols} out of range for shape {x.shape}")
    values = x.values[:, idx]

    def backward_fn(g):
        full = np.zeros_like(x.values)
        np.add.at(full.T, idx, g.T)
        _accumulate(x, full)

    return _make(values, (x,), backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].values.shape[0]
    for p in parts:
        if p.values.ndim != 2 or p.values.shape[0] != rows:
            raise ShapeError(
                "concat_cols: row counts disagree: "
                + ", ".join(str(q.shape) for q in parts)
            )
    values = np.concatenate([p.values for p in parts], axis=1)
    widths = [p.values.shape[1] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, w in zip(parts, widths):
            if _needs(p):
                _accumulate(p, g[:, offset:offset + w])
            offset += w

    return _make(values, tuple(parts), backward_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table: (V, d)[ids] -> (len(ids), d)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup expects a 1-d id sequence, got shape {idx.shape}")
    if idx.size == 0:
        raise ShapeError("embedding_lookup: empty id sequence")
    if idx.min() < 0 or idx.max() >= table.values.shape[0]:
        raise ShapeError(
            f"embedding_lookup: ids out of range [0, {table.values.shape[0]}) "
            f"(got min {idx.min()}, max {idx.max()})"
        )
    values = table.values[idx]

    def backward_fn(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _make(values, (table,), backward_fn)


def scatter_cols(x: Tensor, col_ids, n_cols: int) -> Tensor:
    """Accumulate column j of x into output column col_ids[j].

    (m, k) with a length-k id vector -> (m, n_cols).  Repeated ids sum.
    Linear in x, so the gradient is a plain gather of the output grad.
    """
    idx = np.asarray(col_ids, dtype=np.int64)
    if x.values.ndim != 2 or idx.ndim != 1 or idx.size != x.values.shape[1]:
        raise ShapeError(
            f"scatter_cols: got value shape {x.shape} and {idx.size} column ids"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= n_cols):
        raise ShapeError(f"scatter_cols: column ids out of range [0, {n_cols})")
    values = np.zeros((x.values.shape[0], n_cols), dtype=np.float64)
    np.add.at(values.T, idx, x.values.T)

    def backward_fn(g):
        _accumulate(x, g[:, idx])

    return _make(values, (x,), backward_fn)


# ---------------------------------------------------------------------------
# normalization and regularization


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with optional boolean keep-mask.

    Masked-out entries get exactly zero weight and receive zero
    gradient.  A row with no kept entries cannot be normalized and
    raises ``DegenerateRowError``.
    """
    v = x.values
    if v.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != v.shape:
            raise ShapeError(f"softmax_rows: mask shape {keep.shape} != value shape {v.shape}")
        if not keep.all(axis=1).all():
            if (~keep.any(axis=1)).any():
                raise DegenerateRowError("softmax row with every entry masked")
            shifted = np.where(keep, v, -np.inf)
        else:
            keep = None
            shifted = v
    else:
        keep = None
        shifted = v
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * values).sum(axis=1, keepdims=True)
        _accumulate(x, values * (g - inner))

    return _make(values, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise layer normalization with learned gain and bias (1-d each)."""
    v = x.values
    if v.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    d = v.shape[1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv_std
    values = xhat * gain.values + bias.values

    def backward_fn(g):
        if _needs(gain):
            _accumulate(gain, (g * xhat).sum(axis=0))
        if _needs(bias):
            _accumulate(bias, g.sum(axis=0))
        if _needs(x):
            dxhat = g * gain.values
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(values, (x, gain, bias), backward_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout.  Identity when not training or when rate is 0.

    The rng stream is only consumed when a mask is actually drawn, so
    evaluation passes never perturb training-time reproducibility.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.values.shape) >= rate
    factor = keep / (1.0 - rate)
    values = x.values * factor

    def backward_fn(g):
        _accumulate(x, g * factor)

    return _make(values, (x,), backward_fn)
