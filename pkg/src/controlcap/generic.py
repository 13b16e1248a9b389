"""Elementwise functions that dispatch on the scalar kind.

The dynamics and controllers are written once against these helpers and then
run on Python floats, numpy arrays (batched rollouts), :class:`Interval`
enclosures or :class:`~controlcap.autodiff.Jet` derivatives.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DivisionByZeroInterval


def _is_plain(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def sin(x):
    if _is_plain(x):
        return math.sin(x)
    if isinstance(x, np.ndarray):
        return np.sin(x)
    return x.sin()


def cos(x):
    if _is_plain(x):
        return math.cos(x)
    if isinstance(x, np.ndarray):
        return np.cos(x)
    return x.cos()


def arccos(x):
    if _is_plain(x):
        return math.acos(min(1.0, max(-1.0, x)))
    if isinstance(x, np.ndarray):
        return np.arccos(np.clip(x, -1.0, 1.0))
    return x.arccos()


def wrapped_angle(theta):
    """|theta| reduced to [0, pi], i.e. arccos(cos(theta))."""
    return arccos(cos(theta))


def sqr(x):
    if _is_plain(x) or isinstance(x, np.ndarray):
        return x * x
    return x.sqr()


def tanh(x):
    if _is_plain(x):
        return math.tanh(x)
    if isinstance(x, np.ndarray):
        return np.tanh(x)
    return x.tanh()


def relu(x):
    if _is_plain(x):
        return max(x, 0.0)
    if isinstance(x, np.ndarray):
        return np.maximum(x, 0.0)
    return x.relu()


def clip(x, lo: float, hi: float):
    """Clip with the guard semantics of the scalar kind.

    Floats and arrays are clipped directly; intervals and jets refuse to
    straddle a breakpoint.
    """
    if _is_plain(x):
        return min(max(x, lo), hi)
    if isinstance(x, np.ndarray):
        return np.clip(x, lo, hi)
    return x.clip(lo, hi)


def clamp(x, lo: float, hi: float):
    """Unguarded clip, used where only an enclosure of the value is needed."""
    if _is_plain(x):
        return min(max(x, lo), hi)
    if isinstance(x, np.ndarray):
        return np.clip(x, lo, hi)
    return x.clamp(lo, hi)


def divide(a, b):
    """Division that treats an exact float zero denominator as an error."""
    if _is_plain(b):
        if b == 0.0:
            raise DivisionByZeroInterval("division by exact zero")
    elif isinstance(b, np.ndarray) and np.any(b == 0.0):
        raise DivisionByZeroInterval("division by exact zero")
    return a / b
