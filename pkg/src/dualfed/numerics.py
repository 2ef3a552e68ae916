"""Small reverse-mode autodiff core on top of numpy.

Every op appends one node to a :class:`Tape`; :func:`backward` walks the
tape once in reverse recording order, which is a valid reverse topological
order because a node can only be created after its operands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Array = np.ndarray


class NonFiniteError(FloatingPointError):
    """Raised when a loss or intermediate value is NaN or infinite."""


class Var:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "trainable", "name", "op")
    # make numpy defer to our reflected operators (ndarray - Var -> Var.__rsub__)
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape", parents=(), backward_fn=None,
                 trainable=False, name=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.trainable = trainable
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []

    def param(self, value, name: str) -> Var:
        v = Var(np.array(value, dtype=np.float64), self, trainable=True, name=name)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        v = Var(value, self)
        self.nodes.append(v)
        return v

    def record(self, value, parents, backward_fn, op) -> Var:
        v = Var(value, self, parents=parents, backward_fn=backward_fn, op=op)
        self.nodes.append(v)
        return v

    def params(self) -> dict[str, Var]:
        return {n.name: n for n in self.nodes if n.trainable}


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(grad: Array, shape) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Var, g: Array) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return tape.record(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return tape.record(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return tape.record(a.value * b.value, (a, b), back, "mul")


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = a.value / b.value

    def back(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.value, b.shape))

    return tape.record(out, (a, b), back, "div")


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return x.tape.record(out, (x,), lambda g: _accumulate(x, g * (1.0 - out**2)), "tanh")


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.tape.record(out, (x,), lambda g: _accumulate(x, g * out), "exp")


def log(x: Var) -> Var:
    return x.tape.record(np.log(x.value), (x,), lambda g: _accumulate(x, g / x.value), "log")


def absolute(x: Var) -> Var:
    return x.tape.record(np.abs(x.value), (x,), lambda g: _accumulate(x, g * np.sign(x.value)), "abs")


def clip(x: Var, lo, hi) -> Var:
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    inside = (x.value > lo) & (x.value < hi)
    out = np.clip(x.value, lo, hi)
    return x.tape.record(out, (x,), lambda g: _accumulate(x, g * inside), "clip")


def minimum(a, b) -> Var:
    # ties route the gradient to the first operand
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    take_a = a.value <= b.value

    def back(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return tape.record(np.where(take_a, a.value, b.value), (a, b), back, "minimum")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")

    av, bv = a.value, b.value

    def back(g):
        if bv.ndim == 1:
            _accumulate(a, np.outer(g, bv) if av.ndim == 2 else g * bv)
            _accumulate(b, av.T @ g if av.ndim == 2 else g * av)
        elif av.ndim == 1:
            _accumulate(a, bv @ g)
            _accumulate(b, np.outer(av, g))
        else:
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)

    return tape.record(a.value @ b.value, (a, b), back, "matmul")


def transpose(x: Var) -> Var:
    return x.tape.record(x.value.T, (x,), lambda g: _accumulate(x, g.T), "transpose")


# ---------------------------------------------------------------- reductions / indexing

def total(x: Var, axis=None) -> Var:
    out = x.value.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return x.tape.record(out, (x,), back, "sum")


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(total(x, axis), 1.0 / n)


def pick(x: Var, idx) -> Var:
    """Row-wise gather ``x[i, idx[i]]`` from a 2-D var."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (rows, idx), g)
        _accumulate(x, full)

    return x.tape.record(x.value[rows, idx], (x,), back, "pick")


def take_rows(x: Var, rows) -> Var:
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, rows, g)
        _accumulate(x, full)

    return x.tape.record(x.value[rows], (x,), back, "take_rows")


# ---------------------------------------------------------------- composite primitives

def l2_normalize(x: Var, axis=-1, min_norm=1e-12) -> Var:
    norm = np.linalg.norm(x.value, axis=axis, keepdims=True)
    if np.any(norm < min_norm):
        raise DegenerateEmbeddingError(f"latent norm below {min_norm}")
    y = x.value / norm

    def back(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(x, (g - y * dot) / norm)

    return x.tape.record(y, (x,), back, "l2_normalize")


def softmax_with_temperature(sims, tau: float, axis=-1) -> Array:
    """Numerically stable ``exp(s/tau) / sum exp(s/tau)`` on plain arrays."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(sims, dtype=np.float64) / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Var, tau: float, axis=-1) -> Var:
    p = softmax_with_temperature(x.value, tau, axis)

    def back(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        _accumulate(x, p * (g - dot) / tau)

    return x.tape.record(p, (x,), back, "softmax")


def log_softmax(x: Var, tau: float, axis=-1) -> Var:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = x.value / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        _accumulate(x, (g - p * g.sum(axis=axis, keepdims=True)) / tau)

    return x.tape.record(out, (x,), back, "log_softmax")


class DegenerateEmbeddingError(ValueError):
    pass


# ---------------------------------------------------------------- reverse pass

def backward(tape: Tape, loss: Var) -> dict[str, Array]:
    """Gradients of a scalar ``loss`` w.r.t. every trainable leaf on ``tape``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NonFiniteError(f"loss is {float(loss.value)}; training step aborted")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node.grad)
    out = {}
    for node in tape.nodes:
        if node.trainable:
            out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def finite_diff_gradient(f: Callable[[dict[str, Array]], float],
                         params: Mapping[str, Array], h: float = 1e-5) -> dict[str, Array]:
    """Central-difference gradient of ``f`` at ``params`` (coordinate by coordinate)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(base)
            flat[i] = orig - h
            down = f(base)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: Mapping[str, Array], numeric: Mapping[str, Array],
                       floor: float = 1e-8) -> float:
    """Largest elementwise |a-n|/max(|a|,|n|), ignoring entries where both are below ``floor``."""
    worst = 0.0
    for k in analytic:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale >= floor
        if mask.any():
            worst = max(worst, float(np.max(np.abs(a - n)[mask] / scale[mask])))
    return worst


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: Mapping[str, Array], grads: Mapping[str, Array],
              state: AdamState, lr: float) -> dict[str, Array]:
    """One Adam update. Returns new arrays; a non-finite gradient skips the step."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return {k: v.copy() for k, v in params.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p.copy()
            continue
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1**state.step)
        v_hat = v / (1 - b2**state.step)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out
