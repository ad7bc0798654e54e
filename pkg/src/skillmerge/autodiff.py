"""Dense-tensor reverse-mode differentiation over a fixed operation set.

Values are contiguous float64 numpy arrays; each op builds a `Var` holding
the result plus vector-Jacobian closures for its parents. The op set is
exactly what the toy transformer and the coefficient trainers need; there
is no general tracing, broadcasting is limited to trailing-dim bias/scalar
patterns, and every gradient rule is hand-registered and checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from skillmerge.errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def ensure_finite(x: Array, what: str = "tensor") -> Array:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _as_value(x) -> Array:
    # note: ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.asarray(x, dtype=np.float64, order="C")


class Var:
    """A node in the computation graph.

    `parents` pairs each parent Var with a closure mapping the output
    gradient to that parent's gradient contribution. Leaves created with
    requires_grad=True accumulate into `.grad` during backward().
    """

    __slots__ = ("value", "grad", "requires_grad", "parents")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple[tuple["Var", Callable[[Array], Array]], ...] = (),
    ):
        self.value = _as_value(value)
        self.grad: Array | None = None
        self.parents = tuple(p for p in parents if p[0].requires_grad)
        self.requires_grad = requires_grad or bool(self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value) -> Var:
    """Trainable leaf."""
    return Var(value, requires_grad=True)


def const(value) -> Var:
    """Non-trainable leaf (inputs, frozen weights, masks)."""
    return Var(value, requires_grad=False)


def backward(loss: Var) -> None:
    """Reverse accumulation from a scalar-shaped loss.

    Every requires_grad leaf reachable from `loss` receives dLoss/dLeaf in
    its `.grad` (accumulated, so zero grads between optimizer steps).
    """
    if loss.value.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    # Iterative topological order (graphs can be deep during generation).
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.parents:
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value
    return Var(
        out,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value
    return Var(
        out,
        parents=(
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def scale(a: Var, c: float) -> Var:
    """Multiply by a python scalar constant."""
    c = float(c)
    return Var(a.value * c, parents=((a, lambda g: g * c),))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("matmul needs >=2-D operands", av.shape, bv.shape)
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError("matmul inner dimensions disagree", av.shape, bv.shape)
    out = av @ bv

    def grad_a(g: Array) -> Array:
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def grad_b(g: Array) -> Array:
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return Var(out, parents=((a, grad_a), (b, grad_b)))


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)
    return Var(out, parents=((a, lambda g: g * (a.value > 0)),))


def gelu(a: Var) -> Var:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + k*x^3)))."""
    x = a.value
    u = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def grad(g: Array) -> Array:
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)

    return Var(out, parents=((a, grad),))


def softmax_lastdim(a: Var) -> Var:
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g: Array) -> Array:
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return Var(y, parents=((a, grad),))


def layernorm_lastdim(a: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis; affine gain/bias are applied by the
    caller with mul/add so this op stays affine-free."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def grad(g: Array) -> Array:
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    return Var(y, parents=((a, grad),))


def embedding_lookup(table: Var, ids: Array) -> Var:
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.value.shape[0]):
        raise ContractError("embedding ids out of range")
    out = table.value[ids]

    def grad(g: Array) -> Array:
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return gt

    return Var(out, parents=((table, grad),))


def cross_entropy_masked(logits: Var, targets: Array, mask: Array) -> Var:
    """Mean negative log-likelihood over positions with mask == 1.

    logits: [..., vocab]; targets: integer array matching logits[:-1] dims;
    mask: 0/1 array of the same shape as targets.
    """
    x = logits.value
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    if targets.shape != x.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError("cross_entropy_masked shapes disagree", x.shape, targets.shape)
    total = mask.sum()
    if total == 0:
        raise DegenerateBatchError("loss mask selects no positions")

    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / total

    def grad(g: Array) -> Array:
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g / total) * (p - onehot) * mask[..., None]

    return Var(loss, parents=((logits, grad),))


def slice_lastdim(a: Var, i: int) -> Var:
    """a[..., i:i+1]; keeps the trailing axis for broadcasting."""
    out = a.value[..., i : i + 1]

    def grad(g: Array) -> Array:
        ga = np.zeros_like(a.value)
        ga[..., i : i + 1] = g
        return ga

    return Var(out, parents=((a, grad),))


def sum_all(a: Var) -> Var:
    return Var(a.value.sum(), parents=((a, lambda g: np.ones_like(a.value) * g),))


def mean_all(a: Var) -> Var:
    n = a.value.size
    return Var(a.value.mean(), parents=((a, lambda g: np.full_like(a.value, float(g) / n)),))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), parents=((a, lambda g: g.reshape(old)),))


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return Var(np.transpose(a.value, axes), parents=((a, lambda g: np.transpose(g, inv)),))


# Registry of unary/binary ops exercised by the finite-difference check.
DIFFERENTIABLE_OPS: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layernorm_lastdim": layernorm_lastdim,
    "embedding_lookup": embedding_lookup,
    "cross_entropy_masked": cross_entropy_masked,
}
