"""Dense float64 tensors with a define-by-run tape for reverse-mode autodiff.

Every differentiable computation in the package is built from the closed set
of primitives registered in ``PRIMITIVES``.  A primitive is recorded only when
a :class:`Tape` is active and at least one input requires a gradient; outside
a tape the same code runs as plain numpy inference.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    ...     grads = tape.backward(loss)
    >>> grads[x].tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

LOG_CLAMP = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "derog_active_tape", default=None
)


class Tensor:
    """A numpy array plus autodiff bookkeeping.

    ``data`` is always a float64 ndarray; ``shape`` mirrors it.  ``grad`` is
    filled (and accumulated) by :meth:`Tape.backward` for leaf tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: tuple[Tape, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, severed from any tape."""
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar over the primitives
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.full(like.shape, float(value)))


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; the tape is single-use and is consumed by
    :meth:`backward`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise UsageError("cannot re-enter a consumed tape")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind, inputs, output, vjp) -> None:
        output.tape_node = (self, len(self.nodes))
        self.nodes.append(_Node(kind, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every reachable leaf that requires grad.

        Leaf gradients are accumulated into ``leaf.grad`` and also returned
        as a mapping from leaf tensor to gradient array.
        """
        if self.consumed:
            raise UsageError("backward called on a consumed tape")
        if loss.shape != (1,):
            raise DimensionError(f"backward: loss must have shape [1], got {list(loss.shape)}")
        if loss.tape_node is None or loss.tape_node[0] is not self:
            raise UsageError("backward: loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones(1)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t.tape_node is not None and t.tape_node[0] is self:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                elif key in leaves:
                    leaves[key] = (t, leaves[key][1] + gi)
                else:
                    leaves[key] = (t, gi)

        self.consumed = True
        self.nodes = []
        out: dict[Tensor, np.ndarray] = {}
        for t, g in leaves.values():
            g = np.array(g, dtype=np.float64).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            out[t] = g
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


@contextlib.contextmanager
def no_tape():
    """Suspend recording; primitives evaluated inside produce constants."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run backward on the tape that recorded ``loss``."""
    if loss.tape_node is None:
        if loss.shape != (1,):
            raise DimensionError(f"backward: loss must have shape [1], got {list(loss.shape)}")
        raise UsageError("backward: loss is not on a tape (consumed or never recorded)")
    return loss.tape_node[0].backward(loss)


# ---------------------------------------------------------------------------
# primitives: each returns (output array, vjp closure)


def _check_2d(kind, *arrays):
    for a in arrays:
        if a.ndim != 2:
            raise DimensionError(f"{kind}: expected 2-D operands, got shape {list(a.shape)}")


def _reduce_like(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _binary_shapes(kind, a, b):
    if a.shape == b.shape:
        return
    # row replication: b is one row broadcast over every row of a
    if a.ndim == 2 and ((b.ndim == 2 and b.shape == (1, a.shape[1])) or b.shape == (a.shape[1],)):
        return
    raise DimensionError(f"{kind}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _matmul(a, b):
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {list(a.shape)} @ {list(b.shape)}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _add(a, b):
    _binary_shapes("add", a, b)
    return a + b, lambda g: (g, _reduce_like(g, b.shape))


def _sub(a, b):
    _binary_shapes("sub", a, b)
    return a - b, lambda g: (g, -_reduce_like(g, b.shape))


def _elementwise_mul(a, b):
    _binary_shapes("elementwise_mul", a, b)
    return a * b, lambda g: (g * b, _reduce_like(g * a, b.shape))


def _scalar_mul(a, scalar):
    c = float(scalar)
    return a * c, lambda g: (g * c,)


def _rowwise_concat(*arrays):
    _check_2d("rowwise_concat", *arrays)
    rows = {a.shape[0] for a in arrays}
    if len(rows) != 1:
        raise DimensionError(
            f"rowwise_concat: row counts differ {[list(a.shape) for a in arrays]}"
        )
    splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
    return np.concatenate(arrays, axis=1), lambda g: tuple(np.split(g, splits, axis=1))


def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: (g * mask,)


def _sigmoid(x):
    s = np.exp(-np.logaddexp(0.0, -x))
    return s, lambda g: (g * s * (1.0 - s),)


def _row_softmax(x):
    _check_2d("row_softmax", x)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return s, vjp


def _log(x):
    live = x > LOG_CLAMP
    safe = np.maximum(x, LOG_CLAMP)
    return np.log(safe), lambda g: (np.where(live, g / safe, 0.0),)


def _exp(x):
    y = np.exp(x)
    return y, lambda g: (g * y,)


def _sum_all(x):
    return np.array([x.sum()]), lambda g: (np.full(x.shape, g[0]),)


def _mean_all(x):
    n = x.size
    return np.array([x.sum() / n]), lambda g: (np.full(x.shape, g[0] / n),)


def _sum_rows(x):
    _check_2d("sum_rows", x)
    return x.sum(axis=1, keepdims=True), lambda g: (np.broadcast_to(g, x.shape).copy(),)


def _l1_norm_rows(x):
    _check_2d("l1_norm_rows", x)
    return np.abs(x).sum(axis=1, keepdims=True), lambda g: (g * np.sign(x),)


def _check_index(kind, index, bound):
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise DimensionError(f"{kind}: index must be a 1-D integer vector")
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise DimensionError(f"{kind}: index out of range [0, {bound})")
    return index


def _index_rows(x, index):
    _check_2d("index_rows", x)
    index = _check_index("index_rows", index, x.shape[0])

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return x[index], vjp


def _scatter_sum_rows(x, index, num_segments):
    _check_2d("scatter_sum_rows", x)
    index = _check_index("scatter_sum_rows", index, num_segments)
    if index.shape[0] != x.shape[0]:
        raise DimensionError(
            f"scatter_sum_rows: index length {index.shape[0]} != rows {x.shape[0]}"
        )
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, index, x)
    return out, lambda g: (g[index],)


def _grad_reverse(x, lam):
    lam = float(lam)
    if not np.isfinite(lam):
        raise ConfigError("grad_reverse: lambda must be finite")
    neg = -lam
    return x.copy(), lambda g: (neg * g,)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "elementwise_mul": _elementwise_mul,
    "scalar_mul": _scalar_mul,
    "rowwise_concat": _rowwise_concat,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "row_softmax": _row_softmax,
    "log": _log,
    "exp": _exp,
    "sum_all": _sum_all,
    "mean_all": _mean_all,
    "sum_rows": _sum_rows,
    "l1_norm_rows": _l1_norm_rows,
    "index_rows": _index_rows,
    "scatter_sum_rows": _scatter_sum_rows,
    "grad_reverse": _grad_reverse,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate one primitive and record it on the active tape if needed."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ConfigError(f"unknown primitive kind {kind!r}") from None
    out, vjp = fn(*(t.data for t in inputs), **attrs)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result = Tensor._wrap(out, requires_grad=True)
        tape.record(kind, inputs, result, vjp)
        return result
    return Tensor._wrap(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("elementwise_mul", [a, b])


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return apply_primitive("scalar_mul", [a], scalar=scalar)


def rowwise_concat(tensors: Iterable[Tensor]) -> Tensor:
    return apply_primitive("rowwise_concat", list(tensors))


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def row_softmax(x: Tensor) -> Tensor:
    return apply_primitive("row_softmax", [x])


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped below at 1e-12."""
    return apply_primitive("log", [x])


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", [x])


def sum_all(x: Tensor) -> Tensor:
    return apply_primitive("sum_all", [x])


def mean_all(x: Tensor) -> Tensor:
    return apply_primitive("mean_all", [x])


def sum_rows(x: Tensor) -> Tensor:
    """Row sums as an m x 1 column."""
    return apply_primitive("sum_rows", [x])


def l1_norm_rows(x: Tensor) -> Tensor:
    return apply_primitive("l1_norm_rows", [x])


def index_rows(x: Tensor, index) -> Tensor:
    return apply_primitive("index_rows", [x], index=np.asarray(index, dtype=np.int64))


def scatter_sum_rows(x: Tensor, index, num_segments: int) -> Tensor:
    """Segment sum: row ``s`` of the output sums the rows of ``x`` with index ``s``."""
    return apply_primitive(
        "scatter_sum_rows", [x], index=np.asarray(index, dtype=np.int64), num_segments=int(num_segments)
    )


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""
    return apply_primitive("grad_reverse", [x], lam=lam)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------


def finite_difference_gradcheck(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure; it must be
    deterministic.  Per coordinate the error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ConfigError("gradcheck: eps must be positive")

    def value() -> float:
        out = f()
        if out.shape != (1,):
            raise DimensionError(f"gradcheck: f must return shape [1], got {list(out.shape)}")
        v = float(out.data[0])
        if not np.isfinite(v):
            raise NumericError("gradcheck: f returned a non-finite value")
        return v

    with Tape() as tape:
        out = f()
        if out.shape != (1,):
            raise DimensionError(f"gradcheck: f must return shape [1], got {list(out.shape)}")
        if not np.isfinite(out.data[0]):
            raise NumericError("gradcheck: f returned a non-finite value")
        grads = tape.backward(out) if out.tape_node is not None else {}

    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape)).ravel()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
