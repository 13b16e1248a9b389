"""Forward-mode automatic differentiation over a generic scalar kind.

A :class:`Jet` carries a value and its partial derivatives with respect to ``k``
independent variables. The partials live on an extra leading axis, so a jet
whose value is an array of shape ``S`` has partials of shape ``(k,) + S``. The
value may be a float, a numpy array or an :class:`Interval`; over intervals the
jet encloses the derivative over the whole box.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import generic
from .errors import NonSmoothCrossing
from .interval_core import Interval, as_interval


def _is_jet(x) -> bool:
    return isinstance(x, Jet)


class Jet:
    __slots__ = ("value", "partials")
    __array_ufunc__ = None
    __array_priority__ = 2000

    def __init__(self, value, partials):
        self.value = value
        self.partials = partials

    @property
    def nvars(self) -> int:
        return self.partials.shape[0]

    @staticmethod
    def variables(values: Sequence) -> list["Jet"]:
        """Seed one jet per independent variable with unit partials."""
        k = len(values)
        out = []
        for i, v in enumerate(values):
            if isinstance(v, Interval):
                shape = (k,) + v.shape
                p = np.zeros(shape)
                p[i] = 1.0
                out.append(Jet(v, Interval.point(p)))
            else:
                v = v if isinstance(v, np.ndarray) else float(v)
                shape = (k,) + np.shape(v)
                p = np.zeros(shape)
                p[i] = 1.0
                out.append(Jet(v, p))
        return out

    def _const_partials(self):
        return self.partials * 0.0

    # arithmetic -------------------------------------------------------------
    def __neg__(self):
        return Jet(-self.value, -self.partials)

    def __pos__(self):
        return self

    def __add__(self, other):
        if _is_jet(other):
            return Jet(self.value + other.value, self.partials + other.partials)
        return Jet(self.value + other, self.partials)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_jet(other):
            return Jet(self.value - other.value, self.partials - other.partials)
        return Jet(self.value - other, self.partials)

    def __rsub__(self, other):
        return Jet(other - self.value, -self.partials)

    def __mul__(self, other):
        if _is_jet(other):
            return Jet(
                self.value * other.value,
                self.partials * other.value + other.partials * self.value,
            )
        return Jet(self.value * other, self.partials * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_jet(other):
            q = generic.divide(self.value, other.value)
            return Jet(q, (self.partials - other.partials * q) / other.value)
        q = generic.divide(self.value, other)
        return Jet(q, self.partials / other)

    def __rtruediv__(self, other):
        # other / self with other constant
        q = generic.divide(other, self.value)
        return Jet(q, -(self.partials * q) / self.value)

    def __pow__(self, k):
        if k == 2:
            return self.sqr()
        if k == 1:
            return self
        raise NotImplementedError("only squares are supported")

    # elementary functions -----------------------------------------------------
    def sqr(self):
        return Jet(generic.sqr(self.value), self.partials * (self.value * 2.0))

    def sin(self):
        return Jet(generic.sin(self.value), self.partials * generic.cos(self.value))

    def cos(self):
        return Jet(generic.cos(self.value), -(self.partials * generic.sin(self.value)))

    def tanh(self):
        t = generic.tanh(self.value)
        return Jet(t, self.partials * (1.0 - generic.sqr(t)))

    def relu(self):
        v = self.value
        if isinstance(v, Interval):
            pos = v.lo > 0.0
            neg = v.hi < 0.0
            if not np.all(pos | neg):
                raise NonSmoothCrossing("relu argument touches its kink")
            mask = pos.astype(float)
        else:
            mask = (np.asarray(v) > 0.0).astype(float)
        return Jet(generic.relu(v), self.partials * mask)

    def clip(self, lo: float, hi: float):
        """Clip with derivative 0 on saturated branches and 1 inside.

        Over intervals the branch must be strict: touching a breakpoint is a
        non-smooth point for the derivative and raises.
        """
        v = self.value
        if isinstance(v, Interval):
            above = v.lo > hi
            below = v.hi < lo
            inside = (v.lo > lo) & (v.hi < hi)
            if not np.all(above | below | inside):
                raise NonSmoothCrossing(f"jet clip not strictly on one branch of [{lo}, {hi}]")
            mask = inside.astype(float)
        else:
            arr = np.asarray(v)
            mask = ((arr > lo) & (arr < hi)).astype(float)
        return Jet(generic.clip(v, lo, hi), self.partials * mask)

    def clamp(self, lo: float, hi: float):
        return self.clip(lo, hi)

    def arccos(self):
        raise NotImplementedError("arccos is not differentiated")

    def __repr__(self):
        return f"Jet(value={self.value!r}, partials={self.partials!r})"


def jacobian(f: Callable, x):
    """Jacobian of ``f`` at a point vector or over an interval box.

    ``f`` maps a sequence of scalars to a sequence of scalars and must be
    written against :mod:`controlcap.generic` so it accepts jets. Returns a
    float matrix for a point argument and an interval matrix for an interval
    argument.
    """
    is_interval = isinstance(x, Interval)
    if is_interval:
        values = [x[i] for i in range(len(x))]
    else:
        values = [float(v) for v in np.asarray(x, dtype=float).ravel()]
    n = len(values)
    seeds = Jet.variables(values)
    out = f(seeds)
    rows = []
    for y in out:
        if _is_jet(y):
            rows.append(y.partials)
        elif is_interval:
            rows.append(Interval.point(np.zeros(n)))
        else:
            rows.append(np.zeros(n))
    if is_interval:
        return Interval.stack([as_interval(r) for r in rows])
    return np.array(rows, dtype=float).reshape(len(rows), n)


def value_of(y):
    """Strip derivative information from a jet (identity on plain scalars)."""
    return y.value if _is_jet(y) else y
