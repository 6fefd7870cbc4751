"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors whose inputs
require gradients record a local-gradient rule on the output; calling
:func:`backward` on a scalar result linearizes the recorded operations into a
:class:`ComputationTape` (creation order, which is a valid topological order)
and replays it once in reverse, accumulating gradients into the leaves.

Everything runs in float64 so finite-difference checks certify cleanly;
checkpoints downcast to float32 on disk (see :mod:`eqsnn.checkpoint`).

A tape is single-threaded; independent graphs may run in parallel threads.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, NumericError, ShapeError

Array = np.ndarray

_node_counter = itertools.count()

# When true, every recorded op verifies its output is finite. Off by default
# for speed; selected entry points (losses, optimizer steps) always check.
FINITE_CHECKS = False


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus reverse-mode bookkeeping.

    ``parents`` and ``rule`` are set only on tensors produced by an operation
    on at least one gradient-requiring input; for leaves both stay empty.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "rule", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.rule: Callable[[Array], tuple[Array, ...]] | None = None
        self.node_id = next(_node_counter)

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context that suppresses graph recording; forward values only.

    Used for detached passes (history encoding, evaluation) where
    building gradient rules would waste time and memory.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _record(data: Array, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap an op result; attach the gradient rule when any parent needs it."""
    out = Tensor(data)
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced in forward pass")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.rule = rule
    return out


class ComputationTape:
    """Recorded operations reachable from a root, in execution order.

    Creation order is a topological order by construction: every operand of
    an entry was created (and therefore recorded) before the entry itself.
    """

    def __init__(self, root: Tensor):
        entries: list[Tensor] = []
        seen: set[int] = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.rule is not None:
                entries.append(t)
                stack.extend(t.parents)
        entries.sort(key=lambda n: n.node_id)
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)


def backward(root: Tensor) -> dict[int, Array]:
    """Reverse-accumulate d(root)/d(leaf) for every reachable leaf.

    ``root`` must be scalar (size 1). Each tape entry is visited exactly
    once. Gradients accumulate into ``leaf.grad``; the returned map is keyed
    by ``id(leaf)`` for callers that need it without touching the tensors.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    tape = ComputationTape(root)
    grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t))
        local = t.rule(g)
        for p, lg in zip(t.parents, local):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + lg
            else:
                grads[key] = lg
    # whatever is left in the map belongs to leaves (rule is None)
    leaf_grads: dict[int, Array] = {}
    for t in _collect_leaves(root):
        g = grads.get(id(t))
        if g is None:
            continue
        g = np.broadcast_to(g, t.data.shape).astype(np.float64, copy=True) if g.shape != t.data.shape else g
        t.grad = g if t.grad is None else t.grad + g
        leaf_grads[id(t)] = g
    return leaf_grads


def _collect_leaves(root: Tensor) -> list[Tensor]:
    leaves: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.rule is None:
            if t.requires_grad:
                leaves.append(t)
        else:
            stack.extend(t.parents)
    return leaves


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# elementwise arithmetic ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p
    return _record(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _record(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _record(data, (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _record(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _record(data, (a,), lambda g: (g * data * (1.0 - data),))


def absolute(a: Tensor) -> Tensor:
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient flows to the first operand."""
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g * mask, a.data.shape), _unbroadcast(g * ~mask, b.data.shape)))


def where(mask: Array, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask itself is constant."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, a.data, b.data)
    return _record(data, (a, b), lambda g: (
        _unbroadcast(g * mask, a.data.shape), _unbroadcast(g * ~mask, b.data.shape)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the closed interval."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(data, (a,), lambda g: (g * inside,))


# reductions & shaping -------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(data, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _record(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record(data, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(data, tensors, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-d inputs multiply normally; leading axes batch."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(data, (a, b), rule)


# neural primitives ----------------------------------------------------------

def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x >= 0, slope * x elsewhere. One learnable slope per call site."""
    if not np.all(np.isfinite(slope.data)):
        raise NumericError("prelu slope must be finite")
    neg_mask = x.data < 0
    data = np.where(neg_mask, slope.data * x.data, x.data)

    def rule(g):
        gx = g * np.where(neg_mask, slope.data, 1.0)
        gs = _unbroadcast(g * x.data * neg_mask, slope.data.shape)
        return gx, gs

    return _record(data, (x, slope), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; output rows along ``axis`` sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((g - inner) * s,)

    return _record(s, (x,), rule)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis in ``groups`` equal slices to mean 0, var 1.

    Affine gain/bias are applied by the caller so this op stays a pure
    normalization. Feature count must be divisible by ``groups``.
    """
    feats = x.data.shape[-1]
    if groups < 1 or feats % groups != 0:
        raise ConfigError(f"{feats} features not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    gshape = x.data.shape[:-1] + (groups, feats // groups)
    xg = x.data.reshape(gshape)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    data = xhat.reshape(x.data.shape)

    def rule(g):
        gg = g.reshape(gshape)
        gm = gg.mean(axis=-1, keepdims=True)
        gx = inv * (gg - gm - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (gx.reshape(x.data.shape),)

    return _record(data, (x,), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Zero each element with probability ``rate``; scale survivors by
    1/(1-rate). Identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale
    return _record(data, (x,), lambda g: (g * keep * scale,))


def custom_unary(x: Tensor, values: Array, local_grad: Array) -> Tensor:
    """An op with externally supplied forward values and local derivative.

    Used for nonlinearities whose training-time derivative is intentionally
    decoupled from the forward map (surrogate gradients).
    """
    values = np.asarray(values, dtype=np.float64)
    local_grad = np.asarray(local_grad, dtype=np.float64)
    if values.shape != x.data.shape or local_grad.shape != x.data.shape:
        raise ShapeError("custom_unary values/grad must match input shape")
    return _record(values, (x,), lambda g: (g * local_grad,))


# initializers ---------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> Tensor:
    """Uniform in +/- sqrt(6 / (fan_in + fan_out)), scale-stable across the
    wide-to-narrow layer schedules used here."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent deterministic generators derived from one seed."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n)]
