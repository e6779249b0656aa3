"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation applied to :class:`Var` handles.
Nodes hold whole arrays, and a dense layer is a single ``affine`` node, so
the tape grows with network depth rather than with the number of weights.

The module-level functions (``sin``, ``logistic``, ``affine`` ...) accept
either plain arrays or ``Var`` handles.  Plain inputs short-circuit to numpy,
which lets model and loss code be written once and run both with and without
a tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import NumericError, TapeStateError

__all__ = [
    "Tape",
    "Var",
    "SGD",
    "Adam",
    "backward",
    "grad_wrt_input",
    "sgd_step",
    "accumulate_gradients",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "exp",
    "log",
    "sin",
    "cos",
    "logistic",
    "softplus",
    "leaky_relu",
    "clip",
    "affine",
    "matmul",
    "sum",
    "mean",
    "concat",
    "exclusive_cumprod",
    "exclusive_cumsum",
    "reshape",
    "take",
    "flat_slice",
    "value_of",
]


@dataclass
class _Node:
    kind: str
    parents: tuple
    vjps: tuple


@dataclass
class _Scatter:
    """Cotangent that lands in a flat slice of the parent."""

    start: int
    stop: int
    value: np.ndarray


class Var:
    """Handle to a value recorded on a tape (the tape's notion of a dual value)."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def primal(self):
        return self.value

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.value.shape})"

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
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Record of array operations, swept once in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.parameters: list[int] = []
        self._grads = None

    def __len__(self):
        return len(self.nodes)

    def parameter(self, value) -> Var:
        """Register a trainable leaf; its gradient is returned by ``backward``."""
        var = self._leaf(value, "parameter")
        self.parameters.append(var.index)
        return var

    def variable(self, value) -> Var:
        """Register a non-trainable leaf whose gradient can still be queried."""
        return self._leaf(value, "input")

    def _leaf(self, value, kind):
        self._check_open()
        arr = np.array(value, dtype=np.result_type(value, np.float64))
        return self._push(arr, kind, (), ())

    def _push(self, value, kind, parents, vjps) -> Var:
        self.nodes.append(_Node(kind, tuple(parents), tuple(vjps)))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def _check_open(self):
        if self._grads is not None:
            raise TapeStateError("tape already swept; record a new tape")

    @property
    def swept(self) -> bool:
        return self._grads is not None

    def backward(self, output: Var) -> list[np.ndarray]:
        """Reverse sweep from a scalar output.

        Returns the gradient of ``output`` with respect to each registered
        parameter, in registration order.  Unreachable parameters get zeros.
        A tape can be swept only once.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        self._check_open()
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")

        grads: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            if not np.all(np.isfinite(self.values[i])):
                raise NumericError(f"non-finite primal at node {i} ({self.nodes[i].kind})", node=i)
            node = self.nodes[i]
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if isinstance(contrib, _Scatter):
                    if grads[parent] is None:
                        grads[parent] = np.zeros_like(self.values[parent])
                        owned[parent] = True
                    elif not owned[parent]:
                        grads[parent] = np.array(grads[parent], copy=True)
                        owned[parent] = True
                    grads[parent].reshape(-1)[contrib.start:contrib.stop] += contrib.value.reshape(-1)
                elif grads[parent] is None:
                    grads[parent] = contrib
                    owned[parent] = False
                else:
                    grads[parent] = grads[parent] + contrib
                    owned[parent] = True
        self._grads = grads

        out = []
        for idx in self.parameters:
            g = grads[idx]
            g = np.zeros_like(self.values[idx]) if g is None else np.asarray(g, dtype=self.values[idx].dtype)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter node {idx}", node=idx)
            out.append(g)
        return out

    def grad(self, var: Var) -> np.ndarray:
        """Gradient of the swept output with respect to ``var``."""
        if self._grads is None:
            raise TapeStateError("call backward() before querying gradients")
        g = self._grads[var.index]
        return np.zeros_like(var.value) if g is None else np.asarray(g)


def backward(tape: Tape, output: Var) -> list[np.ndarray]:
    return tape.backward(output)


def grad_wrt_input(tape: Tape, output: Var, inputs) -> np.ndarray:
    """Sweep ``tape`` from ``output`` and return d(output)/d(inputs).

    ``inputs`` is either one ``Var`` (typically an ``(n, 3)`` block of
    positions, in which case a summed output gives per-point gradients) or a
    sequence of scalar ``Var`` coordinates, stacked in order.
    """
    tape.backward(output)
    if isinstance(inputs, Var):
        return tape.grad(inputs)
    return np.array([tape.grad(v) for v in inputs], dtype=np.float64).reshape(-1)


def sgd_step(params, grads, learning_rate: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads.reshape(-1)))[0])
        raise NumericError(f"non-finite gradient at index {bad}", node=bad)
    return params - learning_rate * grads


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = None

    def step(self, params, grads):
        if self.momentum == 0.0:
            return sgd_step(params, grads, self.learning_rate)
        grads = np.asarray(grads, dtype=np.float64)
        if self._velocity is None:
            self._velocity = np.zeros_like(grads)
        self._velocity = self.momentum * self._velocity + grads
        return sgd_step(params, self._velocity, self.learning_rate)


class Adam:
    """Adam with bias correction, for a flat parameter vector."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = self._v = None
        self.t = 0

    def step(self, params, grads):
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ValueError(f"parameter shape {params.shape} != gradient shape {grads.shape}")
        if not np.all(np.isfinite(grads)):
            raise NumericError("non-finite gradient passed to optimiser")
        if self._m is None:
            self._m = np.zeros_like(grads)
            self._v = np.zeros_like(grads)
        self.t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grads
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grads * grads
        m_hat = self._m / (1.0 - self.beta1**self.t)
        v_hat = self._v / (1.0 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def accumulate_gradients(per_tape: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Sum gradient lists from several tapes in their given order."""
    total = [np.array(g, dtype=np.float64, copy=True) for g in per_tape[0]]
    for grads in per_tape[1:]:
        for acc, g in zip(total, grads):
            acc += g
    return total


# -- primitive plumbing -------------------------------------------------------


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _record(kind, value, args, vjps):
    tape = _tape_of(*args)
    tape._check_open()
    parents, fns = [], []
    for a, fn in zip(args, vjps):
        if isinstance(a, Var) and fn is not None:
            parents.append(a.index)
            fns.append(fn)
    return tape._push(value, kind, parents, fns)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(value_of(x))


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if _tape_of(a, b) is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record("add", out, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if _tape_of(a, b) is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record("sub", out, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if _tape_of(a, b) is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(
        "mul", out, (a, b), (lambda g: _unbroadcast(g * vb, sa), lambda g: _unbroadcast(g * va, sb))
    )


def div(a, b):
    va, vb = value_of(a), value_of(b)
    out = va / vb
    if _tape_of(a, b) is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(
        "div",
        out,
        (a, b),
        (lambda g: _unbroadcast(g / vb, sa), lambda g: _unbroadcast(-g * out / vb, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return _record("neg", -a.value, (a,), (lambda g: -g,))


def _unary(kind, fn, dfn):
    """Build an elementwise primitive from its value and local derivative."""

    def op(a):
        if not isinstance(a, Var):
            return fn(a)
        out = fn(a.value)
        local = dfn(a.value, out)
        return _record(kind, out, (a,), (lambda g: g * local,))

    op.__name__ = kind
    return op


def _logistic(x):
    x = np.asarray(x, dtype=np.float64) if np.isscalar(x) else x
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


square = _unary("square", np.square, lambda x, y: 2.0 * x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
logistic = _unary("logistic", _logistic, lambda x, y: y * (1.0 - y))
softplus = _unary("softplus", _softplus, lambda x, y: _logistic(x))


def leaky_relu(a, slope: float = 0.2):
    if not isinstance(a, Var):
        return np.where(a > 0, a, slope * a)
    local = np.where(a.value > 0, 1.0, slope)
    return _record("leaky_relu", a.value * local, (a,), (lambda g: g * local,))


def clip(a, lo: float, hi: float):
    """Clamp; the gradient is zero where the clamp is active."""
    if not isinstance(a, Var):
        return np.clip(a, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record("clip", np.clip(a.value, lo, hi), (a,), (lambda g: g * inside,))


# -- linear algebra -------------------------------------------------------------


def matmul(x, w):
    """``x @ w.T`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    vx, vw = value_of(x), value_of(w)
    out = vx @ vw.T
    if _tape_of(x, w) is None:
        return out

    def dx(g):
        return g @ vw

    def dw(g):
        return _rows(g).T @ _rows(vx)

    return _record("matmul", out, (x, w), (dx, dw))


def _rows(a):
    """Collapse leading axes; explicit so zero-width inputs still reshape."""
    return a.reshape(int(np.prod(a.shape[:-1])), a.shape[-1])


def affine(x, w, b):
    """Fused dense layer ``x @ w.T + b``; one tape node per layer."""
    vx, vw, vb = value_of(x), value_of(w), value_of(b)
    out = vx @ vw.T + vb
    if _tape_of(x, w, b) is None:
        return out

    def dx(g):
        return g @ vw

    def dw(g):
        return _rows(g).T @ _rows(vx)

    def db(g):
        return _rows(g).sum(axis=0)

    return _record("affine", out, (x, w, b), (dx, dw, db))


# -- reductions and reshaping -----------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _record("sum", np.asarray(out), (a,), (vjp,))


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return div(sum(a, axis=axis), float(n))


def exclusive_cumprod(a):
    """``out[..., i] = prod(a[..., :i])`` along the last axis (``out[..., 0] = 1``).

    The reverse rule divides by ``a``, so entries must be non-zero; callers
    clamp transmittance factors away from zero.
    """
    va = value_of(a)
    ones = np.ones(va.shape[:-1] + (1,), dtype=np.result_type(va, np.float64))
    out = np.concatenate([ones, np.cumprod(va[..., :-1], axis=-1)], axis=-1)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        gp = g * out
        # sum over i > k of g_i * out_i, divided by a_k
        tail = np.cumsum(gp[..., ::-1], axis=-1)[..., ::-1]
        tail = np.concatenate([tail[..., 1:], np.zeros_like(tail[..., :1])], axis=-1)
        return tail / va

    return _record("exclusive_cumprod", out, (a,), (vjp,))


def exclusive_cumsum(a):
    """``out[..., i] = sum(a[..., :i])`` along the last axis."""
    va = value_of(a)
    out = np.concatenate([np.zeros(va.shape[:-1] + (1,)), np.cumsum(va[..., :-1], axis=-1)], axis=-1)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        tail = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return np.concatenate([tail[..., 1:], np.zeros_like(tail[..., :1])], axis=-1)

    return _record("exclusive_cumsum", out, (a,), (vjp,))


def concat(parts, axis=-1):
    if _tape_of(*parts) is None:
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    vjps = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        vjps.append(vjp)
    return _record("concat", out, tuple(parts), tuple(vjps))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return _record("reshape", a.value.reshape(shape), (a,), (lambda g: np.reshape(g, old),))


def take(a, key):
    """Basic or advanced indexing, ``a[key]``."""
    if not isinstance(a, Var):
        return a[key]
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return full

    return _record("take", np.asarray(a.value[key]), (a,), (vjp,))


def flat_slice(a, start: int, shape):
    """View of a contiguous run of a flat parameter vector, reshaped.

    The cotangent is scattered straight into the parent's gradient buffer.
    """
    stop = start + int(np.prod(shape))
    if not isinstance(a, Var):
        return a[start:stop].reshape(shape)
    return _record(
        "flat_slice", a.value[start:stop].reshape(shape), (a,), (lambda g: _Scatter(start, stop, g),)
    )

