"""Small reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` objects;
:func:`backward` walks the record in reverse once.  Operands that are plain
arrays are treated as constants.
"""

from __future__ import annotations

import json
import math
import zlib
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Var:
    __slots__ = ("value", "tape", "idx", "name")

    def __init__(self, value, tape: "Tape", idx: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[tuple[int, tuple, Callable]] = []
        self.n_vars = 0
        self.params: dict[str, Var] = {}
        self.outputs: list[Var] = []
        self.grads: dict[int, np.ndarray] = {}
        # checksums of the branch taken by each non-smooth primitive
        self.branches: list[int] = []

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.asarray(value, dtype=float), self, self.n_vars, name)
        self.n_vars += 1
        return v

    def record(self, value, parents: tuple, vjp: Callable) -> Var:
        out = Var(value, self, self.n_vars)
        self.n_vars += 1
        self.nodes.append((out.idx, parents, vjp))
        return out

    def grad(self, v: Var) -> np.ndarray:
        """Gradient accumulated on ``v`` by the last :func:`backward` call."""
        g = self.grads.get(v.idx)
        return np.zeros_like(v.value) if g is None else g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _note_branch(inputs, choice: np.ndarray) -> None:
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.branches.append(zlib.crc32(np.ascontiguousarray(choice).tobytes()))


def _op(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(value, tuple(inputs), vjp)


# ---------------------------------------------------------------- primitives

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    return _op(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    return _op(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv

    def vjp(g):
        ga = _unbroadcast(g * bv, np.shape(av)) if isinstance(a, Var) else None
        gb = _unbroadcast(g * av, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return _op(out, (a, b), vjp)


def matmul(a, b):
    """Batched matrix product following ``np.matmul`` broadcasting (ndim >= 2)."""
    av, bv = _val(a), _val(b)
    if av.ndim > 2 and bv.ndim == 2:
        # stack of rows times one matrix: a single 2-D product is much faster
        lead = av.shape[:-1]
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(*lead, bv.shape[1])

        def vjp(g):
            g2 = g.reshape(-1, bv.shape[1])
            ga = (g2 @ bv.T).reshape(av.shape) if isinstance(a, Var) else None
            gb = av.reshape(-1, av.shape[-1]).T @ g2 if isinstance(b, Var) else None
            return ga, gb

        return _op(out, (a, b), vjp)
    out = av @ bv

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if isinstance(a, Var) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if isinstance(b, Var) else None
        return ga, gb

    return _op(out, (a, b), vjp)


def const_matmul(S, x):
    """``S @ x`` for a constant (possibly sparse) 2-D matrix ``S``."""
    xv = _val(x)
    out = np.asarray(S @ xv)
    return _op(out, (x,), lambda g: (np.asarray(S.T @ g),))


def leaky_relu(x, slope: float = 0.1):
    xv = _val(x)
    pos = xv > 0
    _note_branch((x,), pos)
    d = np.where(pos, 1.0, slope)
    return _op(xv * d, (x,), lambda g: (g * d,))


def exp(x):
    out = np.exp(_val(x))
    return _op(out, (x,), lambda g: (g * out,))


def log(x):
    xv = _val(x)
    return _op(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    out = np.sqrt(_val(x))
    return _op(out, (x,), lambda g: (g / (2.0 * out),))


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    xv = _val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _op(out, (x,), vjp)


def mean(x, axis=None):
    xv = _val(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / n)


def softmax(x, axis: int = -1):
    xv = _val(x)
    z = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op(out, (x,), vjp)


def log_softmax(x, axis: int = -1):
    xv = _val(x)
    sh = xv - xv.max(axis=axis, keepdims=True)
    out = sh - np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _op(out, (x,), vjp)


def max_reduce(x, axis: int):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    xv = _val(x)
    arg = np.argmax(xv, axis=axis)  # argmax returns the lowest index on ties
    _note_branch((x,), arg)
    out = np.take_along_axis(xv, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _op(out, (x,), vjp)


def weighted_max_pool(F, M):
    """``out[j, d, s] = max_i M[i, s] * F[i, j, d]`` for F (N, J, D), M (N, S).

    Same result and tie rule as ``max_reduce(F[..., None] * M[:, None, None], 0)``
    without materialising the N x J x D x S product.
    """
    Fv, Mv = _val(F), _val(M)
    n, J, D = Fv.shape
    S = Mv.shape[1]
    F2 = Fv.reshape(n, J * D)
    cols = np.arange(J * D)
    arg = np.empty((S, J * D), dtype=np.intp)
    out = np.empty((J * D, S))
    for s in range(S):
        prod = F2 * Mv[:, s:s + 1]
        a = prod.argmax(axis=0)
        arg[s] = a
        out[:, s] = prod[a, cols]
    _note_branch((F, M), arg)

    def vjp(g):
        g2 = g.reshape(J * D, S)
        gF = gM = None
        if isinstance(F, Var):
            gF = np.zeros((n, J * D))
            for s in range(S):
                # (arg[s][c], c) pairs are distinct for a fixed slot
                gF[arg[s], cols] += g2[:, s] * Mv[arg[s], s]
            gF = gF.reshape(n, J, D)
        if isinstance(M, Var):
            gM = np.zeros((n, S))
            for s in range(S):
                gM[:, s] = np.bincount(arg[s], weights=g2[:, s] * F2[arg[s], cols], minlength=n)
        return gF, gM

    return _op(out.reshape(J, D, S), (F, M), vjp)


def gather(x, idx, axis: int = 0):
    """``np.take(x, idx, axis)``; the adjoint scatter-adds into ``x``."""
    xv = _val(x)
    idx = np.asarray(idx)
    out = np.take(xv, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        gg = gg.reshape((idx.size,) + gm.shape[1:])
        np.add.at(gm, idx.ravel(), gg)
        return (gx,)

    return _op(out, (x,), vjp)


def concatenate(xs, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(out, tuple(xs), vjp)


def reshape(x, shape):
    xv = _val(x)
    return _op(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    xv = _val(x)
    inv = np.argsort(axes)
    return _op(np.transpose(xv, axes), (x,), lambda g: (np.transpose(g, inv),))


def stop_gradient(x):
    return _val(x)


# ------------------------------------------------------------- run / reverse

def forward(program, params: "ParamStore", inputs: dict | None = None, input_shapes: dict | None = None):
    """Run ``program(tape, param_vars, input_vars)`` on a fresh tape.

    ``input_shapes`` optionally declares shapes (``None`` = any extent) that
    the supplied inputs must match.  Returns ``(output values, tape)``.
    """
    inputs = inputs or {}
    for name, shape in (input_shapes or {}).items():
        actual = np.shape(inputs[name])
        if len(actual) != len(shape) or any(d is not None and d != a for d, a in zip(shape, actual)):
            raise ShapeError(f"input {name!r}: declared {tuple(shape)}, got {actual}")
    tape = Tape()
    pv = {}
    for name in params.names():
        v = tape.leaf(params[name], name)
        pv[name] = v
    tape.params = pv
    iv = {k: tape.leaf(v, k) for k, v in inputs.items()}
    out = program(tape, pv, iv)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    tape.outputs = [o for o in outs if isinstance(o, Var)]
    vals = tuple(_val(o) for o in outs)
    return (vals if isinstance(out, (tuple, list)) else vals[0]), tape


def backward(tape: Tape, cotangents=None, retain_graph: bool = False) -> dict[str, np.ndarray]:
    """Propagate output cotangents; return gradients keyed by parameter name.

    ``cotangents`` is a list aligned with ``tape.outputs`` or a dict keyed by
    output :class:`Var`; the default seeds a single scalar output with 1.
    Afterwards ``tape.grad`` answers for leaves (parameters and inputs).
    Unless ``retain_graph`` is set the recorded nodes are released, which
    also breaks the Var <-> closure cycles holding intermediate arrays.
    """
    grads: dict[int, np.ndarray] = {}
    if cotangents is None:
        cotangents = [np.ones_like(o.value) for o in tape.outputs]
    if isinstance(cotangents, dict):
        items = [(v.idx, np.asarray(c, dtype=float)) for v, c in cotangents.items()]
    else:
        items = [(v.idx, np.asarray(c, dtype=float)) for v, c in zip(tape.outputs, cotangents)]
    for idx, c in items:
        grads[idx] = grads.get(idx, 0.0) + c

    for out_idx, parents, vjp in reversed(tape.nodes):
        # interior gradients are dropped once consumed
        g = grads.pop(out_idx, None)
        if g is None:
            continue
        pgs = vjp(g)
        for p, pg in zip(parents, pgs):
            if isinstance(p, Var):
                if p.idx in grads:
                    grads[p.idx] = grads[p.idx] + pg
                else:
                    grads[p.idx] = pg
    if not retain_graph:
        tape.nodes = []
        tape.outputs = []
    tape.grads = grads
    return {name: grads.get(v.idx, np.zeros_like(v.value)) for name, v in tape.params.items()}


# -------------------------------------------------------------- parameters

class ParamStore:
    """Named float64 parameters with Adam moments."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def register(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        self._values[name] = value
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)

    def names(self) -> list[str]:
        return list(self._values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=float)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {self._values[name].shape}, got {value.shape}")
        self._values[name] = value.copy()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._values.items()}

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k in self._values:
            new._values[k] = self._values[k].copy()
            new._m[k] = self._m[k].copy()
            new._v[k] = self._v[k].copy()
        new.step = self.step
        return new

    def n_params(self) -> int:
        return int(np.sum([v.size for v in self._values.values()]))

    # checkpoint: {name: {"shape": [...], "values": [...]}}
    def to_json(self) -> str:
        doc = {k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
               for k, v in self._values.items()}
        return json.dumps(doc, indent=None, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        doc = json.loads(text)
        store = cls()
        for name, entry in doc.items():
            shape = tuple(entry["shape"])
            vals = np.asarray(entry["values"], dtype=float)
            if vals.size != math.prod(shape):
                raise ShapeError(f"parameter {name!r}: {vals.size} values for shape {shape}")
            store.register(name, vals.reshape(shape))
        return store

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_json(fh.read())


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """In-place Adam update; returns ``store``.  Nothing changes if any
    gradient is non-finite."""
    for name, g in grads.items():
        if name not in store:
            raise KeyError(name)
        if np.shape(g) != store[name].shape:
            raise ShapeError(f"gradient for {name!r}: {np.shape(g)} vs {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    store.step += 1
    t = store.step
    for name, g in grads.items():
        m = store._m[name] = beta1 * store._m[name] + (1 - beta1) * g
        v = store._v[name] = beta2 * store._v[name] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        store._values[name] = store._values[name] - lr * mhat / (np.sqrt(vhat) + eps)
    return store


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, idx, h: float = 1e-4) -> float:
    """Central difference of scalar ``f`` at flat position ``idx`` of ``x``."""
    xp = x.copy().ravel()
    xm = x.copy().ravel()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
