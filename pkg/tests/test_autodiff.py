import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from controlcap import generic
from controlcap.autodiff import Jet, jacobian, value_of
from controlcap.dynamics import MdpConfig, step_with_action
from controlcap.errors import NonSmoothCrossing
from controlcap.interval_core import Interval


def central_fd(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(f(list(x + e)), float) - np.asarray(f(list(x - e)), float)) / (2 * step))
    return np.array(cols).T


def test_sin_at_zero():
    J = jacobian(lambda v: [generic.sin(v[0])], [0.0])
    assert J.shape == (1, 1)
    assert J[0, 0] == 1.0


def test_product_rule_and_quotient():
    def f(v):
        x, y = v
        return [x * y, x / y, generic.sqr(x) - 3.0 * y]

    J = jacobian(f, [2.0, 4.0])
    np.testing.assert_allclose(J, [[4.0, 2.0], [0.25, -2.0 / 16.0], [4.0, -3.0]])


def test_constant_output_row_is_zero():
    J = jacobian(lambda v: [1.0, v[0]], [0.5])
    np.testing.assert_array_equal(J, [[0.0], [1.0]])


@pytest.mark.parametrize("scheme", ["E", "SI"])
def test_pendulum_step_matches_finite_differences(scheme):
    cfg = MdpConfig.pendulum(scheme, 0.05)

    def f(v):
        return list(step_with_action(cfg, tuple(v), 0.0))

    J = jacobian(f, [0.3, 1.0])
    np.testing.assert_allclose(J, central_fd(f, [0.3, 1.0]), atol=1e-6)


def test_interval_jacobian_contains_point_jacobian():
    cfg = MdpConfig.pendulum("E", 0.05)

    def f(v):
        return list(step_with_action(cfg, tuple(v), 0.0))

    box = Interval(np.array([0.29, 0.99]), np.array([0.31, 1.01]))
    JI = jacobian(f, box)
    assert JI.shape == (2, 2)
    assert JI.contains(jacobian(f, [0.3, 1.0]))


def test_clip_derivative_branches():
    (x,) = Jet.variables([3.0])
    assert x.clip(-2, 2).partials[0] == 0.0
    (y,) = Jet.variables([1.0])
    assert y.clip(-2, 2).partials[0] == 1.0


def test_interval_clip_touching_breakpoint_raises():
    (x,) = Jet.variables([Interval(1.0, 2.0)])
    with pytest.raises(NonSmoothCrossing):
        x.clip(-2.0, 2.0)


def test_relu_kink_over_interval_raises():
    (x,) = Jet.variables([Interval(-0.1, 0.1)])
    with pytest.raises(NonSmoothCrossing):
        x.relu()


def test_value_of_passes_floats():
    assert value_of(1.5) == 1.5
    (x,) = Jet.variables([2.0])
    assert value_of(x * 3.0) == 6.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 3))
def test_composite_expression_matches_fd(a, b, c):
    def f(v):
        x, y, z = v
        return [generic.sin(x * y) + generic.cos(z) / z, generic.tanh(x - y) * z, generic.sqr(y) / (1.0 + z)]

    x0 = [a, b, c]
    J = jacobian(f, x0)
    fd = central_fd(f, x0)
    assert np.max(np.abs(J - fd) / np.maximum(1.0, np.abs(J))) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(1e-4, 0.05))
def test_interval_jacobian_encloses_sampled_points(a, b, r):
    def f(v):
        x, y = v
        return [generic.sin(x) * y, x / (2.5 + generic.cos(y))]

    box = Interval(np.array([a - r, b - r]), np.array([a + r, b + r]))
    JI = jacobian(f, box)
    rng = np.random.default_rng(int(abs(a * 1e6)) % 1000)
    for _ in range(10):
        p = rng.uniform(box.lo, box.hi)
        assert JI.contains(jacobian(f, p))
