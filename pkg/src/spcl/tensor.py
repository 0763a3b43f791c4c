"""Dense float32 tensors with reverse-mode differentiation.

The graph is carried by the tensors themselves: every differentiable
operation links its output to its inputs and stores a closure that routes
the output gradient back to them.  ``backward`` walks that structure once,
in reverse topological order, so each recorded operation is replayed
exactly once.  Values are float32 throughout; full reductions accumulate
in float64 before being stored back as float32.

All operations are pure value-in/value-out; evaluation order within one
process is sequential and therefore bit-deterministic.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateEmbeddingError, GraphError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True

# Active multiply-accumulate counters; matmul reports into every one of them.
_mac_counters: list["MacCounter"] = []


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Tallies multiply-accumulate operations performed by matmul."""

    def __init__(self):
        self.macs = 0


@contextmanager
def count_macs():
    """Yield a :class:`MacCounter` that records matmul MACs in the block."""
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


class Tensor:
    """Dense row-major float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate grads of every tensor reachable from ``loss``.

    Repeated calls on *different* graphs accumulate into shared leaves (the
    trainer resets first); a second call on the same graph is an error.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    loss._consumed = True
    if not loss.requires_grad:
        return

    # Iterative DFS (white=0 / gray=1 / black=2) to a reverse topological order.
    color: dict[int, int] = {}
    topo: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack[-1]
        state = color.get(id(node), 0)
        if state == 0:
            color[id(node)] = 1
            for p in node._parents:
                if p.requires_grad and color.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if state == 1:
                color[id(node)] = 2
                topo.append(node)

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b) -> Tensor:
    """a + b where b is a Tensor (equal shape, row bias, or scalar) or a constant."""
    if not isinstance(b, Tensor):
        data = a.data + np.asarray(b, dtype=np.float32)

        def vjp(g):
            _accum(a, g)

        return _result(data, (a,), vjp)

    if a.shape == b.shape:
        data = a.data + b.data

        def vjp(g):
            _accum(a, g)
            _accum(b, g)

        return _result(data, (a, b), vjp)

    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        data = a.data + b.data

        def vjp(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

        return _result(data, (a, b), vjp)

    if b.ndim == 0:
        data = a.data + b.data

        def vjp(g):
            _accum(a, g)
            _accum(b, np.asarray(g.sum(dtype=np.float64), dtype=np.float32))

        return _result(data, (a, b), vjp)

    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b; b may be a same-shape Tensor or a constant."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float32)
        data = a.data * const

        def vjp(g):
            _accum(a, g * const)

        return _result(data, (a,), vjp)

    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def vjp(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    data = a.data - b.data

    def vjp(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    data = a.data / b.data

    def vjp(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(data, (a, b), vjp)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a by a scalar tensor; gradient flows to both operands."""
    if s.size != 1:
        raise ShapeError(f"scale: scalar expected, got shape {s.shape}")
    sval = np.float32(s.data)
    data = a.data * sval

    def vjp(g):
        _accum(a, g * sval)
        ds = np.sum(g * a.data, dtype=np.float64)
        _accum(s, np.asarray(ds, dtype=np.float32).reshape(s.shape))

    return _result(data, (a, s), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        _accum(a, g * data)

    return _result(data, (a,), vjp)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def vjp(g):
        _accum(a, g / a.data)

    return _result(data, (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is in range."""
    data = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float32)

    def vjp(g):
        _accum(a, g * mask)

    return _result(data, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data.astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, (g * d).astype(np.float32))

    return _result(data.astype(np.float32), (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def _dot32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in float64, stored as float32.

    Inner products are reductions; accumulating them in 64-bit keeps the
    float32 pipeline quiet enough for finite-difference verification.
    """
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: 2-D operands required, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    if _mac_counters:
        macs = a.shape[0] * a.shape[1] * b.shape[1]
        for c in _mac_counters:
            c.macs += macs
    data = _dot32(a.data, b.data)

    def vjp(g):
        _accum(a, _dot32(g, b.data.T))
        _accum(b, _dot32(a.data.T, g))

    return _result(data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: 2-D operand required, got {a.shape}")
    data = np.ascontiguousarray(a.data.T)

    def vjp(g):
        _accum(a, g.T)

    return _result(data, (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def vjp(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), vjp)


# ---------------------------------------------------------------------------
# row-wise normalizations


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ShapeError(f"layer_norm: eps must be positive, got {eps}")
    if x.ndim != 2:
        raise ShapeError(f"layer_norm: 2-D input required, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    xv = x.data.astype(np.float64)
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        _accum(gain, (g * xhat).sum(axis=0).astype(np.float32))
        _accum(bias, g.sum(axis=0))
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=1, keepdims=True)
        )
        _accum(x, gx.astype(np.float32))

    return _result(data.astype(np.float32), (x, gain, bias), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows: 2-D input required, got {x.shape}")
    xv = x.data.astype(np.float64)
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        _accum(x, (data * (g - dot)).astype(np.float32))

    return _result(data.astype(np.float32), (x,), vjp)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm (tangent-projected gradient)."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: 2-D input required, got {x.shape}")
    xv = x.data.astype(np.float64)
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {float(norms[bad]):.3e} < 1e-12; "
            "embedding collapsed to the origin"
        )
    data = xv / norms

    def vjp(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        _accum(x, ((g - data * dot) / norms).astype(np.float32))

    return _result(data.astype(np.float32), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(np.sum(x.data, dtype=np.float64), dtype=np.float32)

    def vjp(g):
        _accum(x, np.full(x.shape, np.float32(g), dtype=np.float32))

    return _result(data, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    data = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=np.float32)

    def vjp(g):
        _accum(x, np.full(x.shape, np.float32(g) / np.float32(n), dtype=np.float32))

    return _result(data, (x,), vjp)


def sum_rows(x: Tensor) -> Tensor:
    """Sum along each row of a 2-D tensor, keeping a (rows, 1) shape."""
    if x.ndim != 2:
        raise ShapeError(f"sum_rows: 2-D input required, got {x.shape}")
    data = np.sum(x.data, axis=1, keepdims=True, dtype=np.float64).astype(np.float32)

    def vjp(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# indexing / assembly


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by index; gradients scatter-add back to the source rows."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows: 2-D input required, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    data = x.data[idx]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _result(data, (x,), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    ra = a.shape[0]

    def vjp(g):
        _accum(a, g[:ra])
        _accum(b, g[ra:])

    return _result(data, (a, b), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: all parts need {rows} rows, got {[q.shape for q in parts]}"
            )
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, j0:j1])

    return _result(data, tuple(parts), vjp)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.ndim != 2 or not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{j0}, {j1}) for shape {x.shape}")
    data = np.ascontiguousarray(x.data[:, j0:j1])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[:, j0:j1] = g
        _accum(x, gx)

    return _result(data, (x,), vjp)


def row(x: Tensor, i: int) -> Tensor:
    """Extract row i of a 2-D tensor as a 1-D tensor."""
    if x.ndim != 2 or not (0 <= i < x.shape[0]):
        raise ShapeError(f"row: index {i} out of range for shape {x.shape}")
    data = np.array(x.data[i], copy=True)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[i] = g
        _accum(x, gx)

    return _result(data, (x,), vjp)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor, one per row."""
    width = parts[0].shape[0]
    for p in parts:
        if p.ndim != 1 or p.shape[0] != width:
            raise ShapeError(
                f"stack_rows: 1-D tensors of length {width} required, "
                f"got {[q.shape for q in parts]}"
            )
    data = np.stack([p.data for p in parts], axis=0)

    def vjp(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _result(data, tuple(parts), vjp)


def take_pairs(x: Tensor, partner: np.ndarray) -> Tensor:
    """Pick x[i, partner[i]] for every row i, as a 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"take_pairs: 2-D input required, got {x.shape}")
    partner = np.asarray(partner, dtype=np.intp)
    rows_idx = np.arange(x.shape[0])
    data = np.array(x.data[rows_idx, partner], copy=True)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        np.add.at(gx, (rows_idx, partner), g)
        _accum(x, gx)

    return _result(data, (x,), vjp)
