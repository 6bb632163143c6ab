"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays. Differentiable operations record
themselves on an explicit tape: each node keeps its input tensors, its
output tensor, and a backward rule. The tape is rebuilt per forward pass
(define-by-run); nodes are appended in execution order, so walking the
list in reverse is a valid reverse-topological sweep and gradients
accumulate additively into every tensor that requires them.

A tape is active only inside a ``with Tape():`` block. Outside one the
same operations run gradient-free, which keeps inference-style forward
passes (e.g. attack queries against a frozen model) cheap.

Broadcasting is deliberately restricted: binary elementwise ops accept
same-shape operands or a scalar paired with a tensor, nothing else.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """A caller obligation was violated (non-scalar loss, missing tape, ...)."""


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions hold the real implementations.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class TapeNode:
    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_rule: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


_state = threading.local()


class Tape:
    """Ordered record of operations for one forward pass.

    Tapes nest per thread; the innermost active tape receives new nodes.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def make_op(data: np.ndarray, inputs: Sequence[Tensor],
            backward_rule: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create an op output, recording it if a tape is live and grads flow.

    ``backward_rule`` maps dL/dout to a tuple of per-input gradients
    (``None`` to skip an input). Exposed so other modules can define fused
    operations with hand-derived backward rules.
    """
    inputs = tuple(inputs)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(TapeNode(inputs, out, backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced on the active tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_rule(g_out)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                tensor.grad += g


# ---------------------------------------------------------------------------
# binary elementwise ops (same-shape or scalar-with-tensor only)
# ---------------------------------------------------------------------------

def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither "
                         "equal nor scalar-with-tensor")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Gradient flowing into a scalar operand collapses to its sum.
    if t.size == 1 and g.size != 1:
        return np.sum(g).reshape(t.shape)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a),
                              _reduce_to(g * a.data, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------

def max_with_zero(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    # Subgradient 0 at the kink: only strictly positive inputs pass gradient.
    mask = a.data > 0.0
    return make_op(out, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF, not the tanh approximation."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * phi
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return make_op(out, (a,), lambda g: (g * (phi + a.data * pdf),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# matrix and structural ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return make_op(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return make_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape).copy(), (a,),
                   lambda g: (g.reshape(old),))


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return make_op(out, (a,), rule)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.asarray(np.sum(a.data)), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).astype(np.float64),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return make_op(np.asarray(np.mean(a.data)), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape).astype(np.float64),))


def mean_rows(a) -> Tensor:
    """Column means of a matrix: (n, d) -> (d,)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {a.shape}")
    n = a.shape[0]
    return make_op(a.data.mean(axis=0), (a,),
                   lambda g: (np.tile(g / n, (n, 1)),))


def add_bias(x, b) -> Tensor:
    """Add a vector to every row of a matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} mismatch")
    return make_op(x.data + b.data[None, :], (x, b),
                   lambda g: (g, g.sum(axis=0)))


def slice_cols(a, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got shape {a.shape}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return make_op(a.data[:, lo:hi].copy(), (a,), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def rule(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def rule(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), rule)


def gather_rows(table, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(table.data[idx].copy(), (table,), rule)


def layer_norm(x, gain, offset, eps: float = 1e-12) -> Tensor:
    """Per-row normalization of a matrix with learned gain and offset."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data[None, :] + offset.data[None, :]

    def rule(g):
        gg = g * gain.data[None, :]
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv_std
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return make_op(out, (x, gain, offset), rule)
