"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (LSTMs, fusion layers, the four networks) is built from
the operations in this module.  Arrays are numpy-backed; the graph is a
DAG of Tensor nodes, each holding the closure that propagates its output
gradient to its parents.  backward() visits nodes exactly once, in reverse
topological order, and frees the graph afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by gradient-check mode)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if not (self.requires_grad or self._backward is not None):
            return  # constants never accumulate gradient
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss; frees the graph when done."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free the tape; interior grads are not needed after propagation
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                if node is not self and not node.requires_grad:
                    node.grad = None

    # -- operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, rng: Optional[np.random.Generator] = None,
              scale: float = 0.08, shape=None) -> Tensor:
    """Create a trainable tensor; with rng+shape, init uniform(-scale, scale)."""
    if shape is not None:
        assert rng is not None
        data = rng.uniform(-scale, scale, size=shape)
    return Tensor(data, requires_grad=True)


def _needs_graph(parents: Iterable[Tensor]) -> bool:
    return any(p.requires_grad or p._parents for p in parents)


def _make(data, parents, backward) -> Tensor:
    """Build an output node, attaching the tape only when a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _needs_graph(parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and binary ops ---------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable "
                     "(only equal shapes or scalar-with-tensor)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.shape == g.shape:
        return g
    # scalar operand: sum everything
    return np.sum(g).reshape(t.shape).astype(g.dtype)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a))
        b._accumulate(_unbroadcast(g, b))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a))
        b._accumulate(_unbroadcast(-g, b))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a))
        b._accumulate(_unbroadcast(g * a.data, b))

    return _make(a.data * b.data, (a, b), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(x.data.dtype)

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        x._accumulate(g * sign)

    return _make(np.abs(x.data), (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        x._accumulate(g * y)

    return _make(y, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), backward)


ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
ELEMENTWISE_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "abs": abs_, "relu": relu}


def elementwise(kind: str, *args) -> Tensor:
    if kind in ELEMENTWISE_BINARY:
        return ELEMENTWISE_BINARY[kind](*args)
    if kind in ELEMENTWISE_UNARY:
        return ELEMENTWISE_UNARY[kind](*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def add_bias(mat, bias) -> Tensor:
    """[B, n] + [n]; bias gradient sums over rows."""
    mat, bias = as_tensor(mat), as_tensor(bias)
    if mat.ndim != 2 or bias.ndim != 1 or mat.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {mat.shape} and {bias.shape}")

    def backward(g):
        mat._accumulate(g)
        bias._accumulate(g.sum(axis=0))

    return _make(mat.data + bias.data[None, :], (mat, bias), backward)


def rowscale(mat, col) -> Tensor:
    """Multiply each row of [B, n] by a per-row scalar ([B] or [B, 1])."""
    mat, col = as_tensor(mat), as_tensor(col)
    c = col.data.reshape(-1)
    if mat.ndim != 2 or c.shape[0] != mat.shape[0]:
        raise ShapeError(f"rowscale: shapes {mat.shape} and {col.shape}")

    def backward(g):
        mat._accumulate(g * c[:, None])
        col._accumulate((g * mat.data).sum(axis=1).reshape(col.shape))

    return _make(mat.data * c[:, None], (mat, col), backward)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    parts = [p for p in parts if p.size > 0]
    if not parts:
        raise ShapeError("concat: no non-empty parts")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: mismatched shapes {ref} vs {p.shape} off axis {axis}")
    extents = [p.shape[axis % len(ref)] for p in parts]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis % g.ndim] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


# -- reductions ----------------------------------------------------------------

def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            x._accumulate(np.full_like(x.data, float(g)))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(np.sum(x.data, axis=axis), (x,), backward)


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean: empty axis")

    def backward(g):
        if axis is None:
            x._accumulate(np.full_like(x.data, float(g) / n))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy() / n)

    return _make(np.mean(x.data, axis=axis), (x,), backward)


def reduce_max(x, axis: Optional[int] = None) -> Tensor:
    """Max reduction; gradient routes to the first maximal index (ties)."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("reduce_max: empty tensor")
    if axis is None:
        flat_idx = int(np.argmax(x.data))

        def backward(g):
            full = np.zeros_like(x.data)
            full.flat[flat_idx] = float(g)
            x._accumulate(full)

        return _make(np.max(x.data), (x,), backward)

    idx = np.argmax(x.data, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        x._accumulate(full)

    return _make(np.max(x.data, axis=axis), (x,), backward)


REDUCE_OPS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(kind: str, x, axis: Optional[int] = None) -> Tensor:
    try:
        return REDUCE_OPS[kind](x, axis)
    except KeyError:
        raise ValueError(f"unknown reduce kind {kind!r}") from None


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * take_a, a))
        b._accumulate(_unbroadcast(g * ~take_a, b))

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "maximum")
    take_a = a.data >= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * take_a, a))
        b._accumulate(_unbroadcast(g * ~take_a, b))

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


# -- softmax and losses --------------------------------------------------------

def _softmax_np(v: np.ndarray, axis: int) -> np.ndarray:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = _softmax_np(x.data, axis)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _make(y, (x,), backward)


def cross_entropy_logits(logits, targets: np.ndarray) -> Tensor:
    """Per-row -log softmax(logits)[target]; returns a [B] tensor."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    p = _softmax_np(logits.data, axis=1)
    rows = np.arange(logits.shape[0])
    nll = -np.log(np.maximum(p[rows, targets], 1e-30))

    def backward(g):
        dx = p.copy()
        dx[rows, targets] -= 1.0
        logits._accumulate(dx * g[:, None])

    return _make(nll, (logits,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape}, targets {t.shape}")
    v = logits.data
    # log(1 + exp(-|v|)) + max(v, 0) - t*v
    loss = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0) - t * v
    s = _sigmoid_np(v)

    def backward(g):
        logits._accumulate(g * (s - t))

    return _make(loss, (logits,), backward)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by index; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: x {x.shape}, idx {idx.shape}")

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accumulate(dx)

    return _make(x.data[idx], (x,), backward)


def embedding_lookup(table, ids: np.ndarray, frozen_rows: Sequence[int] = (0,)) -> Tensor:
    """Gather rows of [V, d] by an integer id array; frozen rows get no grad."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")
    frozen = np.zeros(table.shape[0], dtype=bool)
    frozen[list(frozen_rows)] = True

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        dt[frozen] = 0.0
        table._accumulate(dt)

    return _make(table.data[ids], (table,), backward)


# -- optimizer and clipping ------------------------------------------------------

class Adam:
    """Adam with bias correction; defaults follow the training configuration
    (lr 0.001, beta1 0, beta2 0.999, eps 1e-8)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.0, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def global_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(params: Sequence[Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the applied scale (1.0 when no clipping happened)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= scale
    return scale
