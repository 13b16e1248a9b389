"""Outward-rounded interval arithmetic on numpy arrays.

An :class:`Interval` holds two float64 arrays ``lo`` and ``hi`` of identical
shape, so one object can represent a scalar interval, an interval vector or an
interval matrix. Every operation rounds its result outward by one ulp with
``np.nextafter``, which encloses the exactly rounded result of round-to-nearest
arithmetic. Elementary functions are evaluated on monotone pieces and widened by
a few ulps because libm is not correctly rounded.
"""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DivisionByZeroInterval,
    DomainError,
    IntervalOverflow,
    NonSmoothCrossing,
)

_INF = np.inf
_TINY = 2.0 ** -1074
# relative widening for sin/cos/arccos/tanh results (8 ulp)
_FN_REL = 2.0 ** -49
_FN_ABS = 2.0 ** -1060
_U = 2.0 ** -53

TWO_PI_LO = 2.0 * math.pi  # math.pi < pi, doubling is exact
TWO_PI_HI = math.nextafter(2.0 * math.pi, math.inf)
PI_LO = math.pi
PI_HI = math.nextafter(math.pi, math.inf)


def _down(x):
    with np.errstate(over="ignore"):
        return np.nextafter(x, -_INF)


def _up(x):
    with np.errstate(over="ignore"):
        return np.nextafter(x, _INF)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# Error-free transformations decide whether a rounded result is exact, so
# outward rounding only moves endpoints that actually carry an error.
_SPLIT = 134217729.0  # 2**27 + 1
_EXACT_MIN = 2.0 ** -960  # below this Dekker products may underflow


def _two_sum(a, b):
    s = a + b
    bp = s - a
    e = (a - (s - bp)) + (b - bp)
    return s, e


def _split(a):
    c = _SPLIT * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    """``p = fl(a*b)`` and the exact error ``e`` (``valid`` marks where it is exact)."""
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    zero = (a == 0) | (b == 0)
    valid = np.isfinite(e) & np.isfinite(p) & ((np.abs(p) >= _EXACT_MIN) | zero)
    e = np.where(zero, 0.0, e)
    return p, e, valid


def _bounds_from(x, err, valid):
    """Lower/upper bounds of ``x + err`` where only the sign of ``err`` is trusted."""
    lo = np.where(valid & (err >= 0), x, _down(x))
    hi = np.where(valid & (err <= 0), x, _up(x))
    return lo, hi


def _add_bounds(a, b):
    with np.errstate(invalid="ignore", over="ignore"):
        s, e = _two_sum(a, b)
    return _bounds_from(s, e, np.isfinite(e))


def _mul_bounds(a, b):
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        p, e, valid = _two_prod(a, b)
    return _bounds_from(p, e, valid)


def _div_bounds(a, b):
    with np.errstate(invalid="ignore", over="ignore", under="ignore", divide="ignore"):
        q = a / b
        ph, pl, valid = _two_prod(q, b)
        # a - ph is exact (Sterbenz), so the remainder has the right sign
        r = (a - ph) - pl
        err = r * np.sign(b)
    valid = valid & np.isfinite(err) & np.isfinite(q)
    return _bounds_from(q, err, valid)


class Interval:
    """Array of closed intervals ``[lo, hi]`` with binary64 endpoints.

    Scalars, vectors and matrices share this class; ``shape`` reports which.
    Instances are immutable by convention and the underlying arrays are marked
    read-only.
    """

    __slots__ = ("lo", "hi")
    __array_ufunc__ = None  # keep numpy from hijacking mixed expressions
    __array_priority__ = 1000

    def __init__(self, lo, hi=None):
        lo = _as_array(lo)
        hi = lo if hi is None else _as_array(hi)
        if lo.shape != hi.shape:
            lo, hi = np.broadcast_arrays(lo, hi)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise IntervalOverflow("interval endpoints must be finite")
        if np.any(lo > hi):
            raise ValueError("interval with lo > hi")
        self._set(lo, hi)

    def _set(self, lo, hi):
        lo = np.array(lo, dtype=np.float64)
        hi = np.array(hi, dtype=np.float64)
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def _new(cls, lo, hi) -> "Interval":
        """Build from already-rounded endpoints, only checking finiteness."""
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise IntervalOverflow("interval computation overflowed")
        obj = object.__new__(cls)
        obj._set(lo, hi)
        return obj

    def __setattr__(self, name, value):
        raise AttributeError("Interval is immutable")

    # construction helpers -------------------------------------------------
    @classmethod
    def point(cls, x) -> "Interval":
        x = _as_array(x)
        return cls(x, x)

    @classmethod
    def from_decimal(cls, text: str) -> "Interval":
        """Tightest interval containing the exact decimal number ``text``."""
        exact = Fraction(text)
        f = float(exact)
        lo = f if Fraction(f) <= exact else math.nextafter(f, -math.inf)
        hi = f if Fraction(f) >= exact else math.nextafter(f, math.inf)
        return cls(lo, hi)

    @classmethod
    def ball(cls, center, radius) -> "Interval":
        """Enclosure of ``[center - radius, center + radius]``."""
        c = _as_array(center)
        r = _as_array(radius)
        return cls._new(_down(c - r), _up(c + r))

    @classmethod
    def stack(cls, items: Sequence, axis: int = 0) -> "Interval":
        los, his = [], []
        for it in items:
            it = as_interval(it)
            los.append(it.lo)
            his.append(it.hi)
        return cls._new(np.stack(los, axis=axis), np.stack(his, axis=axis))

    @classmethod
    def concatenate(cls, items: Sequence, axis: int = 0) -> "Interval":
        items = [as_interval(it) for it in items]
        return cls._new(
            np.concatenate([np.atleast_1d(i.lo) for i in items], axis=axis),
            np.concatenate([np.atleast_1d(i.hi) for i in items], axis=axis),
        )

    @classmethod
    def zeros(cls, shape) -> "Interval":
        z = np.zeros(shape)
        return cls._new(z, z)

    # array protocol -------------------------------------------------------
    @property
    def shape(self):
        return self.lo.shape

    @property
    def ndim(self):
        return self.lo.ndim

    @property
    def size(self):
        return self.lo.size

    def __len__(self):
        return len(self.lo)

    def __getitem__(self, idx) -> "Interval":
        return Interval._new(self.lo[idx], self.hi[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def reshape(self, *shape) -> "Interval":
        return Interval._new(self.lo.reshape(*shape), self.hi.reshape(*shape))

    @property
    def T(self) -> "Interval":
        return Interval._new(self.lo.T, self.hi.T)

    def broadcast_to(self, shape) -> "Interval":
        return Interval._new(np.broadcast_to(self.lo, shape), np.broadcast_to(self.hi, shape))

    def sum(self, axis=None) -> "Interval":
        return interval_sum(self, axis=axis)

    # derived quantities ---------------------------------------------------
    @property
    def mid(self) -> np.ndarray:
        """Nearest-float midpoint (no overflow for large endpoints)."""
        m = 0.5 * self.lo + 0.5 * self.hi
        return np.clip(m, self.lo, self.hi)

    @property
    def rad(self) -> np.ndarray:
        """Radius about :attr:`mid`, rounded up so the ball covers the interval."""
        m = self.mid
        return np.maximum(_add_bounds(self.hi, -m)[1], _add_bounds(m, -self.lo)[1])

    @property
    def width(self) -> np.ndarray:
        return _add_bounds(self.hi, -self.lo)[1]

    @property
    def mag(self) -> np.ndarray:
        """Largest absolute value in the interval (exact)."""
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    @property
    def mig(self) -> np.ndarray:
        """Smallest absolute value in the interval (exact)."""
        m = np.minimum(np.abs(self.lo), np.abs(self.hi))
        return np.where((self.lo <= 0) & (self.hi >= 0), 0.0, m)

    def contains(self, other) -> bool:
        """True when every element of ``other`` (interval or float) lies inside."""
        if isinstance(other, Interval):
            return bool(np.all((self.lo <= other.lo) & (other.hi <= self.hi)))
        x = _as_array(other)
        return bool(np.all((self.lo <= x) & (x <= self.hi)))

    def contains_zero(self) -> np.ndarray:
        return (self.lo <= 0.0) & (self.hi >= 0.0)

    def overlaps(self, other) -> bool:
        other = as_interval(other)
        return bool(np.all((self.lo <= other.hi) & (other.lo <= self.hi)))

    # arithmetic -----------------------------------------------------------
    def __neg__(self):
        return Interval._new(-self.hi, -self.lo)

    def __pos__(self):
        return self

    def __add__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        return Interval._new(_add_bounds(self.lo, o.lo)[0], _add_bounds(self.hi, o.hi)[1])

    __radd__ = __add__

    def __sub__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        return Interval._new(_add_bounds(self.lo, -o.hi)[0], _add_bounds(self.hi, -o.lo)[1])

    def __rsub__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        return o - self

    def __mul__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        a, b, c, d = self.lo, self.hi, o.lo, o.hi
        bounds = [_mul_bounds(x, y) for x, y in ((a, c), (a, d), (b, c), (b, d))]
        lo = np.minimum(np.minimum(bounds[0][0], bounds[1][0]), np.minimum(bounds[2][0], bounds[3][0]))
        hi = np.maximum(np.maximum(bounds[0][1], bounds[1][1]), np.maximum(bounds[2][1], bounds[3][1]))
        return Interval._new(lo, hi)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        if np.any(o.contains_zero()):
            raise DivisionByZeroInterval("denominator interval contains zero")
        a, b, c, d = self.lo, self.hi, o.lo, o.hi
        bounds = [_div_bounds(x, y) for x, y in ((a, c), (a, d), (b, c), (b, d))]
        lo = np.minimum(np.minimum(bounds[0][0], bounds[1][0]), np.minimum(bounds[2][0], bounds[3][0]))
        hi = np.maximum(np.maximum(bounds[0][1], bounds[1][1]), np.maximum(bounds[2][1], bounds[3][1]))
        return Interval._new(lo, hi)

    def __rtruediv__(self, other):
        o = _coerce(other)
        if o is None:
            return NotImplemented
        return o / self

    def __pow__(self, k):
        if k == 2:
            return self.sqr()
        if k == 1:
            return self
        raise NotImplementedError("only squares are supported")

    # elementary functions ---------------------------------------------------
    def sqr(self) -> "Interval":
        a2lo, a2hi = _mul_bounds(self.lo, self.lo)
        b2lo, b2hi = _mul_bounds(self.hi, self.hi)
        straddle = self.contains_zero()
        lo = np.where(straddle, 0.0, np.maximum(np.minimum(a2lo, b2lo), 0.0))
        hi = np.maximum(a2hi, b2hi)
        return Interval._new(lo, hi)

    def __abs__(self) -> "Interval":
        return Interval._new(self.mig, self.mag)

    def sin(self) -> "Interval":
        return _periodic(self, np.sin, max_at=0.5, min_at=-0.5)

    def cos(self) -> "Interval":
        return _periodic(self, np.cos, max_at=0.0, min_at=1.0)

    def arccos(self) -> "Interval":
        if np.any(self.lo < -1.0) or np.any(self.hi > 1.0):
            raise DomainError("arccos argument leaves [-1, 1]")
        ylo = np.arccos(self.hi)
        yhi = np.arccos(self.lo)
        lo = np.maximum(_down(ylo - _FN_REL * np.abs(ylo) - _FN_ABS), 0.0)
        hi = np.minimum(_up(yhi + _FN_REL * np.abs(yhi) + _FN_ABS), PI_HI)
        return Interval._new(lo, hi)

    def tanh(self) -> "Interval":
        ylo = np.tanh(self.lo)
        yhi = np.tanh(self.hi)
        lo = np.maximum(_down(ylo - _FN_REL * np.abs(ylo) - _FN_ABS), -1.0)
        hi = np.minimum(_up(yhi + _FN_REL * np.abs(yhi) + _FN_ABS), 1.0)
        return Interval._new(lo, hi)

    def relu(self) -> "Interval":
        return Interval._new(np.maximum(self.lo, 0.0), np.maximum(self.hi, 0.0))

    def clip(self, lo: float, hi: float) -> "Interval":
        return clip_guarded(self, lo, hi)

    def clamp(self, lo: float, hi: float) -> "Interval":
        """Unguarded enclosure of ``min(max(x, lo), hi)``."""
        return Interval._new(np.clip(self.lo, lo, hi), np.clip(self.hi, lo, hi))

    # comparisons are ambiguous for intervals -------------------------------
    def __bool__(self):
        raise TypeError("truth value of an Interval is ambiguous")

    def __eq__(self, other):
        if not isinstance(other, Interval):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)
        )

    __hash__ = None

    def __repr__(self):
        if self.ndim == 0:
            return f"Interval({float(self.lo)!r}, {float(self.hi)!r})"
        return f"Interval(shape={self.shape}, lo={self.lo!r}, hi={self.hi!r})"

    # serialization --------------------------------------------------------
    def to_json(self):
        """Scalars become ``{"lo": str, "hi": str}``; arrays become nested lists."""
        if self.ndim == 0:
            return {"lo": repr(float(self.lo)), "hi": repr(float(self.hi))}
        return [self[i].to_json() for i in range(len(self))]

    @classmethod
    def from_json(cls, data) -> "Interval":
        if isinstance(data, dict):
            return cls(float(data["lo"]), float(data["hi"]))
        items = [cls.from_json(d) for d in data]
        if not items:
            return cls._new(np.zeros(0), np.zeros(0))
        return cls.stack(items)


def as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    return Interval.point(x)


def _coerce(x):
    if isinstance(x, Interval):
        return x
    if isinstance(x, (int, float, np.ndarray, np.floating, np.integer)):
        return Interval.point(x)
    return None


def _contains_critical(lo, hi, offset):
    """Whether [lo, hi] may contain a point pi*(offset + 2k) for some integer k.

    Conservative: a nearby critical point counts as contained.
    """
    t_lo = lo / math.pi - offset
    t_hi = hi / math.pi - offset
    slack = 1e-12 * (1.0 + np.maximum(np.abs(t_lo), np.abs(t_hi)))
    k_lo = np.ceil((t_lo - slack) / 2.0)
    k_hi = np.floor((t_hi + slack) / 2.0)
    return k_lo <= k_hi


def _periodic(x: Interval, fn, max_at: float, min_at: float) -> Interval:
    ya = fn(x.lo)
    yb = fn(x.hi)
    lo = np.minimum(ya, yb)
    hi = np.maximum(ya, yb)
    lo = _down(lo - _FN_REL * np.abs(lo) - _FN_ABS)
    hi = _up(hi + _FN_REL * np.abs(hi) + _FN_ABS)
    hi = np.where(_contains_critical(x.lo, x.hi, max_at), 1.0, hi)
    lo = np.where(_contains_critical(x.lo, x.hi, min_at), -1.0, lo)
    wide = (x.hi - x.lo) >= 6.0
    lo = np.where(wide, -1.0, np.maximum(lo, -1.0))
    hi = np.where(wide, 1.0, np.minimum(hi, 1.0))
    return Interval._new(lo, hi)


# module-level operation helpers -------------------------------------------

def sin(x):
    return as_interval(x).sin()


def cos(x):
    return as_interval(x).cos()


def arccos(x):
    return as_interval(x).arccos()


def sqr(x):
    return as_interval(x).sqr()


def iabs(x):
    return abs(as_interval(x))


def clip_guarded(x: Interval, lo: float, hi: float) -> Interval:
    """Clip on a locally smooth branch, refusing to cross a breakpoint.

    Returns the thin bound when ``x`` lies entirely on a saturated side, ``x``
    itself when it lies inside ``[lo, hi]``, and raises
    :class:`NonSmoothCrossing` when ``x`` straddles ``lo`` or ``hi``.
    """
    if not lo < hi:
        raise ValueError("clip_guarded needs lo < hi")
    x = as_interval(x)
    above = x.lo >= hi
    below = x.hi <= lo
    inside = (x.lo >= lo) & (x.hi <= hi)
    if not np.all(above | below | inside):
        raise NonSmoothCrossing(f"interval straddles a clip breakpoint of [{lo}, {hi}]")
    out_lo = np.where(above, hi, np.where(below, lo, x.lo))
    out_hi = np.where(above, hi, np.where(below, lo, x.hi))
    return Interval._new(out_lo, out_hi)


def hull(x, y) -> Interval:
    x, y = as_interval(x), as_interval(y)
    return Interval._new(np.minimum(x.lo, y.lo), np.maximum(x.hi, y.hi))


def intersect(x, y):
    """Elementwise intersection, or ``None`` (the empty marker) if any pair is disjoint."""
    x, y = as_interval(x), as_interval(y)
    lo = np.maximum(x.lo, y.lo)
    hi = np.minimum(x.hi, y.hi)
    if np.any(lo > hi):
        return None
    return Interval._new(lo, hi)


def midpoint(x):
    m = as_interval(x).mid
    return float(m) if m.ndim == 0 else m


def radius(x):
    r = as_interval(x).rad
    return float(r) if r.ndim == 0 else r


def contains(x, y) -> bool:
    return as_interval(x).contains(y)


def interval_vector(entries: Iterable) -> Interval:
    """Build a 1-d interval array from intervals, floats or ``(lo, hi)`` pairs."""
    items = []
    for e in entries:
        if isinstance(e, tuple):
            items.append(Interval(*e))
        else:
            items.append(as_interval(e))
    return Interval.stack(items)


def interval_matrix(rows: Iterable[Iterable]) -> Interval:
    return Interval.stack([interval_vector(r) for r in rows])


# rigorous reductions and products -------------------------------------------

def _gamma(n: int) -> float:
    """Upper bound of gamma_n = n u / (1 - n u), computed with margin."""
    nu = n * _U
    return math.nextafter(1.01 * nu / (1.0 - nu), math.inf)


def _sum_up(values: np.ndarray, axis=-1) -> np.ndarray:
    """Upper bound of the exact sum of nonnegative floats along ``axis``."""
    values = np.asarray(values)
    n = values.shape[axis] if values.ndim else 1
    s = np.sum(values, axis=axis)
    return _up(s * (1.0 + 2.0 * _gamma(n + 1)) + n * _TINY)


def _directed_fsum(values: np.ndarray, direction: int) -> float:
    """Sum rounded down (direction < 0) or up, exact results stay exact.

    ``fsum`` is correctly rounded, and the sign of the residual sum tells
    on which side of the true value the rounded result lies.
    """
    vals = [float(v) for v in values]
    s = math.fsum(vals)
    if not math.isfinite(s):
        raise OverflowError("sum overflow")
    vals.append(-s)
    resid = math.fsum(vals)
    if resid == 0.0:
        return s
    if direction < 0:
        return s if resid > 0 else math.nextafter(s, -math.inf)
    return s if resid < 0 else math.nextafter(s, math.inf)


def interval_sum(x: Interval, axis=None) -> Interval:
    """Rigorous sum of interval entries with an a-priori rounding bound."""
    x = as_interval(x)
    if axis is None or x.ndim == 1:
        try:
            return Interval._new(np.float64(_directed_fsum(x.lo.ravel(), -1)),
                                 np.float64(_directed_fsum(x.hi.ravel(), 1)))
        except (OverflowError, ValueError):
            pass
    if axis is None:
        lo, hi = x.lo.ravel(), x.hi.ravel()
        axis = 0
    else:
        lo, hi = x.lo, x.hi
    n = lo.shape[axis] if lo.ndim else 1
    slo = np.sum(lo, axis=axis)
    shi = np.sum(hi, axis=axis)
    g = 2.0 * _gamma(n + 1)
    elo = g * np.sum(np.abs(lo), axis=axis) + n * _TINY
    ehi = g * np.sum(np.abs(hi), axis=axis) + n * _TINY
    return Interval._new(_down(slo - _up(elo)), _up(shi + _up(ehi)))


def norm_inf(v) -> float:
    """Rigorous upper bound of max_i |v_i| (exact: no rounding involved)."""
    v = as_interval(v)
    if v.size == 0:
        raise ValueError("norm of an empty vector")
    return float(np.max(v.mag))


def matrix_norm_inf(m) -> float:
    """Rigorous upper bound of the induced infinity norm (max absolute row sum)."""
    m = as_interval(m)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("expected a nonempty interval matrix")
    return float(np.max(_sum_up(m.mag, axis=1)))


def norm(x) -> float:
    """Vector max-norm or induced matrix norm depending on dimensionality."""
    x = as_interval(x)
    return norm_inf(x) if x.ndim <= 1 else matrix_norm_inf(x)


_FLOOR = 2.0 ** -600


def rigorous_matmul(a: np.ndarray, b) -> Interval:
    """Enclosure of ``a @ b`` for a float matrix ``a`` and an interval array ``b``.

    Uses midpoint-radius form: the float product of ``a`` with the midpoint of
    ``b`` is bracketed by the standard gamma_n error bound, and the radius part
    is bounded from above, all rounded outward.
    """
    a = _as_array(a)
    b = as_interval(b)
    vec = b.ndim == 1
    bm = b.mid
    br = b.rad
    if vec:
        bm = bm[:, None]
        br = br[:, None]
    k = a.shape[1]
    if bm.shape[0] != k:
        raise ValueError("inner dimensions differ")
    # Tiny entries are moved into the radius so BLAS never sees subnormals,
    # which would slow it down by orders of magnitude.
    small_b = np.abs(bm) < _FLOOR
    if small_b.any():
        br = _up(br + np.where(small_b, np.abs(bm), 0.0))
        bm = np.where(small_b, 0.0, bm)
    br = np.where((br > 0) & (br < _FLOOR), _FLOOR, br)
    small_a = (a != 0) & (np.abs(a) < _FLOOR)
    extra = 0.0
    if small_a.any():
        a = np.where(small_a, 0.0, a)
        extra = _FLOOR * _up(np.sum(np.abs(bm) + br, axis=0))
    g = _gamma(k + 2)
    absa = np.abs(a)
    c = a @ bm
    s = absa @ np.abs(bm)
    r = absa @ br
    err = s * (2.0 * g) + r * (1.0 + 2.0 * g) + (k + 2) * 2.0 ** -1060 + extra * (1.0 + 2.0 * g)
    err = _up(err)
    lo = _down(c - err)
    hi = _up(c + err)
    if vec:
        lo, hi = lo[:, 0], hi[:, 0]
    return Interval._new(lo, hi)


def identity_minus(ab: Interval) -> Interval:
    """Enclosure of ``I - M`` for a square interval matrix ``M``."""
    n = ab.shape[0]
    eye = np.eye(n)
    return Interval._new(_down(eye - ab.hi), _up(eye - ab.lo))
