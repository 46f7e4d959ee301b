"""Minimal reverse-mode engine with explicit per-op adjoints.

Forward code builds values out of a small set of primitives; each primitive
records a vjp closure on the tape.  Replaying the tape in reverse visits each
record exactly once and accumulates gradients; parameters that never touched
the loss get exact zeros.  Constants are plain numpy arrays: only `Var`
instances participate in differentiation.

There is deliberately no graph optimization, broadcasting beyond numpy's own,
or dtype promotion logic: the op set is exactly what the model needs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import InternalError, ShapeError

__all__ = ["Tape", "Var", "value_of"]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Var:
    """A tape-tracked array (or tuple of arrays for multi-output ops)."""

    __slots__ = ("value", "tape")

    def __init__(self, value, tape):
        self.value = value
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records (output, parents, vjp) triples in execution order."""

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[tuple[Var, tuple[Var, ...], object]] = []

    # -- bookkeeping --------------------------------------------------------

    def leaf(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def op(self, value, parents, vjp) -> Var:
        out = Var(value, self)
        if self.record and any(isinstance(p, Var) for p in parents):
            self._records.append((out, tuple(parents), vjp))
        return out

    def gradients(self, loss: Var, wrt: dict) -> dict:
        """Gradients of a scalar loss for every Var in `wrt` (name -> Var)."""
        if not self.record:
            raise InternalError("cannot differentiate through a non-recording tape")
        lval = np.asarray(loss.value)
        if lval.size != 1:
            raise ShapeError("loss must be scalar")
        grads: dict[int, object] = {id(loss): np.ones_like(lval)}

        def accumulate(var: Var, g):
            key = id(var)
            if g is None:
                return
            if key in grads:
                if isinstance(grads[key], list):
                    # tuple-valued var: g is (slot, array)
                    slot, arr = g
                    cur = grads[key][slot]
                    grads[key][slot] = arr if cur is None else cur + arr
                else:
                    grads[key] = grads[key] + g
            else:
                if isinstance(var.value, tuple):
                    slots: list = [None] * len(var.value)
                    slot, arr = g
                    slots[slot] = arr
                    grads[key] = slots
                else:
                    grads[key] = g

        for out, parents, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            if isinstance(g, list):
                g = tuple(
                    gi if gi is not None else np.zeros_like(np.asarray(vi))
                    for gi, vi in zip(g, out.value)
                )
            parent_grads = vjp(g)
            if len(parent_grads) != len(parents):
                raise InternalError("vjp returned wrong number of gradients")
            for p, pg in zip(parents, parent_grads):
                if isinstance(p, Var):
                    accumulate(p, pg)

        out = {}
        for name, var in wrt.items():
            g = grads.get(id(var))
            out[name] = np.zeros_like(var.value) if g is None else np.asarray(g)
        return out

    # -- primitives ---------------------------------------------------------

    def add(self, a, b) -> Var:
        av, bv = value_of(a), value_of(b)
        return self.op(av + bv, (a, b),
                       lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))

    def sub(self, a, b) -> Var:
        av, bv = value_of(a), value_of(b)
        return self.op(av - bv, (a, b),
                       lambda g: (_unbroadcast(g, np.shape(av)),
                                  _unbroadcast(-g, np.shape(bv))))

    def mul(self, a, b) -> Var:
        av, bv = value_of(a), value_of(b)
        return self.op(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, np.shape(av)),
                                  _unbroadcast(g * av, np.shape(bv))))

    def neg(self, a) -> Var:
        return self.op(-value_of(a), (a,), lambda g: (-g,))

    def matmul(self, a, b) -> Var:
        av, bv = value_of(a), value_of(b)
        return self.op(av @ bv, (a, b),
                       lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g))

    def reshape(self, a, shape) -> Var:
        av = value_of(a)
        old = np.shape(av)
        return self.op(np.reshape(av, shape), (a,), lambda g: (np.reshape(g, old),))

    def transpose(self, a, axes) -> Var:
        av = value_of(a)
        inv = np.argsort(axes)
        return self.op(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))

    def getitem(self, a, key) -> Var:
        av = value_of(a)

        def vjp(g):
            full = np.zeros_like(av)
            full[key] += g
            return (full,)

        return self.op(av[key], (a,), vjp)

    def concat(self, parts, axis=-1) -> Var:
        vals = [value_of(p) for p in parts]
        sizes = [v.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return self.op(np.concatenate(vals, axis=axis), tuple(parts), vjp)

    def gather(self, a, idx) -> Var:
        av = value_of(a)
        idx = np.asarray(idx)

        def vjp(g):
            full = np.zeros_like(av)
            np.add.at(full, idx, g)
            return (full,)

        return self.op(av[idx], (a,), vjp)

    def segment_sum(self, a, idx, num: int) -> Var:
        av = value_of(a)
        idx = np.asarray(idx)
        out = np.zeros((num,) + av.shape[1:], dtype=av.dtype)
        np.add.at(out, idx, av)
        return self.op(out, (a,), lambda g: (g[idx],))

    def sum(self, a, axis=None) -> Var:
        av = value_of(a)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, np.shape(av)).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), np.shape(av)).copy(),)

        return self.op(np.sum(av, axis=axis), (a,), vjp)

    def mean(self, a, axis=None) -> Var:
        av = value_of(a)
        count = av.size if axis is None else av.shape[axis]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, np.shape(av)).copy(),)
            return (np.broadcast_to(np.expand_dims(g / count, axis), np.shape(av)).copy(),)

        return self.op(np.mean(av, axis=axis), (a,), vjp)

    def gelu(self, a) -> Var:
        av = value_of(a)
        cdf = 0.5 * (1.0 + erf(av / _SQRT2))
        out = av * cdf

        def vjp(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * av * av)
            return (g * (cdf + av * pdf),)

        return self.op(out, (a,), vjp)

    def absval(self, a) -> Var:
        av = value_of(a)
        return self.op(np.abs(av), (a,), lambda g: (g * np.sign(av),))

    def softplus(self, a) -> Var:
        av = value_of(a)
        out = np.logaddexp(0.0, av)

        def vjp(g):
            return (g / (1.0 + np.exp(-av)),)

        return self.op(out, (a,), vjp)

    def exp(self, a) -> Var:
        out = np.exp(value_of(a))
        return self.op(out, (a,), lambda g: (g * out,))

    def log(self, a) -> Var:
        av = value_of(a)
        return self.op(np.log(av), (a,), lambda g: (g / av,))

    def sqrt(self, a) -> Var:
        out = np.sqrt(value_of(a))
        return self.op(out, (a,), lambda g: (g / (2.0 * out),))

    def tuple_item(self, a: Var, i: int) -> Var:
        def vjp(g):
            return ((i, g),)

        # The parent gradient is a (slot, array) pair routed by accumulate().
        return self.op(a.value[i], (a,), vjp)

    def linear(self, x, W, b=None) -> Var:
        """x @ W (+ b) for 2D x; the workhorse of every perceptron here."""
        y = self.matmul(x, W)
        return y if b is None else self.add(y, b)
