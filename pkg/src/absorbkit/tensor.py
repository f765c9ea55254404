"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation executed while gradients are enabled appends its output node
to the active :class:`GraphTape`. Because nodes are appended in execution
order the tape is already topologically sorted, so :func:`backward` is a
single reverse sweep over it. Once a backward pass completes the tape is
closed and its intermediates are released.

Broadcasting is limited to leading batch dimensions: two operands are
compatible when their shapes are equal or one shape is a suffix of the other.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class InvalidRowError(ValueError):
    """A softmax row had no finite entry (every position was masked)."""


class LifecycleError(RuntimeError):
    """backward() was called on a tape that is already closed."""


class ConfigError(ValueError):
    """An operation received an invalid hyper-parameter."""


class GraphTape:
    """Ordered record of the non-leaf nodes produced in one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.closed = False

    def record(self, node: "Tensor") -> None:
        if self.closed:
            raise LifecycleError("cannot record onto a closed tape")
        node._tape = self
        node._index = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        """Release every intermediate and close the tape."""
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node.grad = None
        self.nodes = []
        self.closed = True

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> GraphTape:
    """Return the tape ops on this thread record onto, opening one if needed."""
    stack = getattr(_local, "stack", None)
    if stack:
        return stack[-1]
    tape = getattr(_local, "default", None)
    if tape is None or tape.closed:
        tape = GraphTape()
        _local.default = tape
    return tape


@contextlib.contextmanager
def tape_scope() -> Iterator[GraphTape]:
    """Run the enclosed ops on a fresh, explicitly owned tape."""
    tape = GraphTape()
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops as constants: nothing is recorded and no grads flow."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A dense row-major float64 array that can take part in a gradient graph.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer of the same shape; backward accumulates into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._tape: GraphTape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None or self.grad.shape != self.data.shape:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the upstream gradient and must push contributions
    into parents with :func:`accumulate`. When no parent requires grad (or
    gradients are disabled) the result is a constant and nothing is recorded.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._tape = None
    out._index = -1
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        current_tape().record(out)
    return out


def accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``fresh=True`` promises ``g`` is a new array nobody else holds, so it can
    be adopted without a copy.
    """
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
        fresh = True
    if t.grad is None:
        t.grad = g if fresh and g.flags.c_contiguous and g.dtype == DTYPE else np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


def _check_leading(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading batch dimensions")


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading(a.shape, b.shape, "add")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return record_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading(a.shape, b.shape, "sub")

    def backward(g):
        accumulate(a, g)
        accumulate(b, -g, fresh=True)

    return record_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_leading(a.shape, b.shape, "mul")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * b.data, fresh=True)
        if b.requires_grad:
            accumulate(b, g * a.data, fresh=True)

    return record_op(a.data * b.data, (a, b), backward)


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        accumulate(a, g * c, fresh=True)

    return record_op(a.data * c, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        accumulate(a, np.broadcast_to(g, a.shape))

    return record_op(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        accumulate(a, np.broadcast_to(g / n, a.shape))

    return record_op(np.asarray(a.data.mean()), (a,), backward)


# --------------------------------------------------------------------------
# shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    _check_leading(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g @ np.swapaxes(b.data, -1, -2), fresh=True)
        if b.requires_grad:
            accumulate(b, np.swapaxes(a.data, -1, -2) @ g, fresh=True)

    return record_op(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward(g):
        accumulate(a, np.ascontiguousarray(np.swapaxes(g, -1, -2)), fresh=True)

    return record_op(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        accumulate(a, np.ascontiguousarray(np.transpose(g, inverse)), fresh=True)

    return record_op(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward(g):
        accumulate(a, g.reshape(a.shape))

    return record_op(np.ascontiguousarray(out), (a,), backward)


# --------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and exact at 0 and +-inf
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        accumulate(x, g * y * (1.0 - y), fresh=True)

    return record_op(y, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= xd
    y *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= xd
        sech2 *= dinner
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        accumulate(x, sech2, fresh=True)

    return record_op(y, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly 0."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: last dimension must be >= 1, got {x.shape}")
    y = _softmax(x.data)

    def backward(g):
        accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)), fresh=True)

    return record_op(y, (x,), backward)


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise InvalidRowError("softmax row has no finite entry (mask removed every position)")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_fill(x: Tensor, keep: np.ndarray) -> Tensor:
    """Replace entries where ``keep`` is False with ``-inf``.

    Kept entries pass through with gradient; the mask itself carries none.
    """
    keep = np.asarray(keep, dtype=bool)
    try:
        keep_b = np.broadcast_to(keep, x.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_fill: mask {keep.shape} does not match {x.shape}") from exc
    out = np.where(keep_b, x.data, -np.inf)

    def backward(g):
        accumulate(x, np.where(keep_b, g, 0.0), fresh=True)

    return record_op(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply per-feature gain and bias."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            accumulate(x, dx, fresh=True)

    return record_op(y, (x, gain, bias), backward)


def embed(ids, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embed: ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embed: id out of range for table with {vocab} rows")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        accumulate(table, gt, fresh=True)

    return record_op(out, (table,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood in nats."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    rows = np.arange(t.size)
    loss = (lse - flat[rows, t]).mean()

    def backward(g):
        p = np.exp(flat - lse[:, None])
        p[rows, t] -= 1.0
        accumulate(logits, (g / t.size) * p.reshape(logits.shape), fresh=True)

    return record_op(np.asarray(loss), (logits,), backward)


# --------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The producing tape is closed afterwards; a second call raises
    :class:`LifecycleError`.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # leaf or constant: nothing upstream to visit
        if loss.requires_grad:
            loss.grad += 1.0
        return
    if tape.closed:
        raise LifecycleError("loss belongs to a tape that was already consumed")
    nodes = tape.nodes
    loss.grad = np.ones((), dtype=DTYPE)
    for i in range(loss._index, -1, -1):
        node = nodes[i]
        if node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None
    tape.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
