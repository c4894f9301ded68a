"""Small reverse-mode differentiation core on numpy arrays, dense nets and Adam.

A :class:`Tape` records every primitive applied to a :class:`Var`. Values are
float64 numpy arrays of any shape; elementwise primitives broadcast like
numpy and the backward pass sums gradients back onto the broadcast shape.

All primitive functions also accept plain numbers/arrays. When none of the
arguments is a ``Var`` they simply evaluate with numpy, so the same numerical
code can run with or without recording.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteGradientError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> "Var":
        """Register a leaf (an input we may differentiate with respect to)."""
        return Var(np.array(value, dtype=np.float64), self, ())

    def __len__(self):
        return len(self.nodes)

    def gradient(self, output: "Var", params) -> list[np.ndarray]:
        if not isinstance(output, Var) or output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ContractError(
                f"gradient needs a scalar output, got shape {output.value.shape}")
        adj: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj.pop(node.index, None)
            if g is None:
                continue
            # leaves keep their adjoint so the caller can read it back
            if not node.parents:
                adj[node.index] = g
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + contrib
                else:
                    adj[parent.index] = contrib
        out = []
        for p in params:
            if not isinstance(p, Var) or p.tape is not self:
                raise ContractError("parameter was not recorded on this tape")
            g = adj.get(p.index)
            out.append(np.zeros_like(p.value) if g is None else _unbroadcast(g, p.value.shape))
        return out


def gradient(output: "Var", params) -> list[np.ndarray]:
    return output.tape.gradient(output, params)


def flat_gradient(output: "Var", params) -> np.ndarray:
    grads = gradient(output, params)
    if not grads:
        return np.zeros(0)
    return np.concatenate([g.ravel() for g in grads])


class Var:
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: Tape, parents):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return vsum(self, axis)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("mixing variables from different tapes")
    return tape


def _val(a):
    return a.value if isinstance(a, Var) else a


def _binary(a, b, value, da, db):
    """Record ``value = f(a, b)``; ``da``/``db`` map the output adjoint to input adjoints."""
    tape = _tape_of(a, b)
    if tape is None:
        return value
    value = np.asarray(value, dtype=np.float64)
    parents = []
    if isinstance(a, Var):
        sa = a.value.shape
        parents.append((a, lambda g: _unbroadcast(da(g), sa)))
    if isinstance(b, Var):
        sb = b.value.shape
        parents.append((b, lambda g: _unbroadcast(db(g), sb)))
    return Var(value, tape, tuple(parents))


def _unary(a, value, da):
    if not isinstance(a, Var):
        return value
    return Var(np.asarray(value, dtype=np.float64), a.tape, ((a, da),))


def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b):
    va, vb = _val(a), _val(b)
    return _binary(a, b, va * vb, lambda g: g * vb, lambda g: g * va)


def div(a, b):
    va, vb = _val(a), _val(b)
    return _binary(a, b, va / vb, lambda g: g / vb, lambda g: -g * va / (vb * vb))


def neg(a):
    return _unary(a, -_val(a), lambda g: -g)


def square(a):
    va = _val(a)
    return _unary(a, va * va, lambda g: 2.0 * g * va)


def exp(a):
    y = np.exp(_val(a))
    return _unary(a, y, lambda g: g * y)


def log(a):
    va = _val(a)
    return _unary(a, np.log(va), lambda g: g / va)


def tanh(a):
    y = np.tanh(_val(a))
    return _unary(a, y, lambda g: g * (1.0 - y * y))


def relu(a):
    va = _val(a)
    # subgradient 0 at exactly 0
    return _unary(a, np.maximum(va, 0.0), lambda g: g * (va > 0.0))


def sqrt(a):
    y = np.sqrt(_val(a))
    return _unary(a, y, lambda g: g * 0.5 / y)


def sinh(a):
    va = _val(a)
    return _unary(a, np.sinh(va), lambda g: g * np.cosh(va))


def cosh(a):
    va = _val(a)
    return _unary(a, np.cosh(va), lambda g: g * np.sinh(va))


def sin(a):
    va = _val(a)
    return _unary(a, np.sin(va), lambda g: g * np.cos(va))


def cos(a):
    va = _val(a)
    return _unary(a, np.cos(va), lambda g: -g * np.sin(va))


def sinh_cosh(a):
    return sinh(a), cosh(a)


def identity(a):
    return a


def activate(a, tag: str):
    if tag == "tanh":
        return tanh(a)
    if tag == "relu":
        return relu(a)
    if tag == "identity":
        return a
    raise ContractError(f"unknown activation {tag!r}")


def vsum(a, axis=None):
    va = _val(a)
    if not isinstance(a, Var):
        return np.sum(va, axis=axis)
    shape = va.shape

    def da(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary(a, np.sum(va, axis=axis), da)


def transpose(a):
    return _unary(a, _val(a).T, lambda g: g.T)


def getitem(a, key):
    va = _val(a)
    if not isinstance(a, Var):
        return va[key]
    shape = va.shape

    def da(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    return _unary(a, va[key], da)


def matmul(a, b):
    va, vb = np.asarray(_val(a)), np.asarray(_val(b))
    if va.ndim == 0 or vb.ndim == 0:
        raise ShapeError("matmul needs arrays, use mul for scalars")
    value = va @ vb

    def da(g):
        if vb.ndim == 1:
            return np.multiply.outer(g, vb) if va.ndim == 2 else g * vb
        if va.ndim == 1:
            return vb @ g
        return g @ vb.T

    def db(g):
        if va.ndim == 1:
            return np.multiply.outer(va, g) if vb.ndim == 2 else g * va
        if vb.ndim == 1:
            return va.T @ g
        return va.T @ g

    return _binary(a, b, value, da, db)


def matvec(m, v):
    if np.ndim(_val(m)) != 2 or np.ndim(_val(v)) != 1:
        raise ShapeError("matvec needs a matrix and a vector")
    return matmul(m, v)


def dot(a, b):
    if np.ndim(_val(a)) != 1 or np.ndim(_val(b)) != 1:
        raise ShapeError("dot needs two vectors")
    return matmul(a, b)


def where(mask, a, b):
    """Select elementwise; no gradient flows through the unselected branch.

    Callers must keep the unselected branch finite, since a zero adjoint times
    an infinite local derivative is still NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    return _binary(a, b, np.where(mask, _val(a), _val(b)),
                   lambda g: np.where(mask, g, 0.0),
                   lambda g: np.where(mask, 0.0, g))


def stack(items, axis=0):
    vals = [np.asarray(_val(x), dtype=np.float64) for x in items]
    value = np.stack(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return value
    parents = []
    for i, x in enumerate(items):
        if isinstance(x, Var):
            parents.append((x, lambda g, i=i: np.take(g, i, axis=axis)))
    return Var(value, tape, tuple(parents))


def concat(items):
    vals = [np.atleast_1d(np.asarray(_val(x), dtype=np.float64)) for x in items]
    value = np.concatenate(vals)
    tape = _tape_of(*items)
    if tape is None:
        return value
    parents = []
    start = 0
    for x, v in zip(items, vals):
        stop = start + v.shape[0]
        if isinstance(x, Var):
            shape = x.value.shape
            parents.append((x, lambda g, s=start, e=stop, sh=shape: g[s:e].reshape(sh)))
        start = stop
    return Var(value, tape, tuple(parents))


# --------------------------------------------------------------------------
# dense networks

@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not form a layer")


@dataclass
class DenseNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeError(
                    f"layer output {prev.weight.shape[0]} feeds layer input {nxt.weight.shape[1]}")

    @classmethod
    def init(cls, sizes, activations, rng, scale=None, low=None, high=None):
        """Build a net with layer widths ``sizes``.

        Default initialization is Glorot-uniform; pass ``scale`` for
        uniform weights in [-scale, scale] instead.  Biases start at zero.
        """
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            lim = scale if scale is not None else np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in))
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params(self):
        return [(l.weight, l.bias) for l in self.layers]

    def leaves(self, tape: Tape):
        return [(tape.var(l.weight), tape.var(l.bias)) for l in self.layers]

    def forward(self, x, params=None):
        """Affine + activation through every layer.

        ``x`` is a single input vector or a batch with one row per input.
        ``params`` optionally replaces the stored weights (e.g. tape leaves).
        """
        xv = _val(x)
        if np.ndim(xv) not in (1, 2) or np.shape(xv)[-1] != self.input_dim:
            raise ShapeError(
                f"input of shape {np.shape(xv)} does not match input dimension {self.input_dim}")
        params = self.params() if params is None else params
        h = x
        for (w, b), layer in zip(params, self.layers):
            if np.ndim(_val(h)) == 1:
                z = add(matmul(w, h), b)
            else:
                z = add(matmul(h, transpose(w)), b)
            h = activate(z, layer.activation)
        return h

    __call__ = forward

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for l in self.layers:
            nw = l.weight.size
            l.weight = flat[pos:pos + nw].reshape(l.weight.shape).copy()
            pos += nw
            l.bias = flat[pos:pos + l.bias.size].copy()
            pos += l.bias.size

    def weight_sq_sum(self, params=None):
        params = self.params() if params is None else params
        total = 0.0
        for w, _ in params:
            total = add(total, vsum(square(w)))
        return total

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def flatten_grads(grads) -> np.ndarray:
    """Flatten per-layer (dW, db) pairs in the order of ``DenseNet.get_flat``."""
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])


def pair_up(items):
    return [(items[i], items[i + 1]) for i in range(0, len(items), 2)]


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def fresh(cls, n, **hyper):
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update. Returns ``(new_params, state)``; ``state`` is updated in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ShapeError("optimizer moments do not match the parameter vector")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradientError(
            f"non-finite gradient in {bad.size} component(s), first at index {bad[0]}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state
