import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from controlcap import dynamics
from controlcap.controllers import ExpressionTree, builtin, zero_controller
from controlcap.dynamics import MdpConfig
from controlcap.search import (
    PenaltySpec,
    SearchConfig,
    accumulated_penalty,
    cmaes_maximize,
    detect_periodic_candidate,
    estimate_threshold,
    fine_tune,
    mean_return,
    periodic_candidates,
    recurrences,
)

PEND_SI = MdpConfig.pendulum("SI", 0.05)


class TestThreshold:
    def test_constant_penalty(self):
        pen = PenaltySpec("constant", value=1.0)
        M = estimate_threshold(PEND_SI, zero_controller(), pen, n_random=10, n_steps=100)
        assert M == 100.0

    def test_single_rollout(self):
        pen = PenaltySpec.for_system("pendulum")
        c = builtin("landajuela_a1")
        M = estimate_threshold(PEND_SI, c, pen, n_random=1, seed=5)
        ic = dynamics.sample_initial_states(PEND_SI, 1, np.random.default_rng(5))
        direct = -dynamics.rollout(PEND_SI, c, ic[0]).total_return
        assert M == pytest.approx(direct, rel=1e-12)

    def test_landajuela_band(self):
        M = estimate_threshold(PEND_SI, builtin("landajuela_a1"), PenaltySpec.for_system("pendulum"), 100)
        assert 150 <= M <= 600

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            estimate_threshold(PEND_SI, zero_controller(), PenaltySpec("constant", value=1.0), 0)

    def test_penalty_uses_clipped_action_even_for_raw_reward(self):
        raw = PEND_SI.with_(reward_action="raw")
        pen = PenaltySpec.for_system("pendulum")
        assert pen(raw, (0.0, 0.0), 50.0) == pytest.approx(0.001 * 4)

    def test_cartpole_shaped(self):
        cfg = MdpConfig.cartpole("SI", 0.01)
        pen = PenaltySpec.for_system("cartpole")
        assert pen(cfg, (0.0, 2.0, math.pi, 1.0), 0.0) == pytest.approx(1.0 + 0.5 + 2.0)


class TestCMAES:
    def test_sphere(self):
        c = np.array([0.3, -1.2, 2.0])
        sc = SearchConfig(box_low=(-5,) * 3, box_high=(5,) * 3, restarts=2, max_generations=200, seed=1,
                          tol_x=1e-14, tol_fun=0.0)
        best = cmaes_maximize(lambda X: -np.sum((X - c) ** 2, axis=1), sc)[0]
        assert np.max(np.abs(np.array(best.ic) - c)) <= 1e-6

    def test_stationary_start(self):
        c = np.array([1.0, 2.0])
        sc = SearchConfig(box_low=(-5, -5), box_high=(5, 5), restarts=1, max_generations=50, sigma0=1e-4, seed=0)
        best = cmaes_maximize(lambda X: -np.sum((X - c) ** 2, axis=1), sc, x0=c)[0]
        assert np.max(np.abs(np.array(best.ic) - c)) <= 1e-3

    def test_optimum_on_boundary_is_respected(self):
        sc = SearchConfig(box_low=(0, 0), box_high=(1, 1), restarts=3, max_generations=80, seed=2)
        best = cmaes_maximize(lambda X: X[:, 0] + X[:, 1], sc)[0]
        assert all(0.0 <= v <= 1.0 for v in best.ic)
        assert best.accumulated_penalty > 1.99

    def test_deterministic(self):
        sc = SearchConfig(box_low=(-1, -1), box_high=(1, 1), restarts=3, max_generations=20, seed=7)
        f = lambda X: np.sin(5 * X[:, 0]) * np.cos(3 * X[:, 1])
        a = cmaes_maximize(f, sc)
        b = cmaes_maximize(f, sc)
        assert [x.ic for x in a] == [x.ic for x in b]

    def test_sorted_output(self):
        sc = SearchConfig(box_low=(-1,), box_high=(1,), restarts=5, max_generations=10, seed=3)
        out = cmaes_maximize(lambda X: -np.abs(X[:, 0] - 0.5), sc)
        vals = [c.accumulated_penalty for c in out]
        assert vals == sorted(vals, reverse=True)

    def test_search_config_defaults(self):
        assert SearchConfig.for_system("pendulum").episode_len == 1000
        assert SearchConfig.for_system("cartpole").episode_len == 2000
        assert SearchConfig.for_system("pendulum").restarts == 50


class TestRecurrences:
    def test_synthetic_periodic(self):
        m = 28
        t = np.arange(200)
        theta = 2 * math.pi * t / m + 0.3 * np.sin(2 * math.pi * t / m)
        omega = np.cos(2 * math.pi * t / m)
        S = np.column_stack([theta, omega])
        rec = recurrences(S, 0, tol=1e-9)
        assert (rec[0].lag, rec[0].j) == (28, 1)
        assert rec[0].gap == pytest.approx(0.0, abs=1e-9)

    def test_monotone_divergent_has_none(self):
        t = np.arange(300, dtype=float)
        S = np.column_stack([0.01 * t ** 1.5, t])
        assert recurrences(S, 0, tol=0.05) == []

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 40), st.integers(-3, 3))
    def test_lag_and_turns_recovered(self, m, j):
        rng = np.random.default_rng(m)
        base = rng.uniform(-1, 1, size=(m, 2))
        reps = 6
        S = np.concatenate([base + np.array([2 * math.pi * j * k, 0.0]) for k in range(reps)])
        rec = recurrences(S, 0, tol=1e-9, min_lag=2)
        assert rec and rec[0].lag == m and rec[0].j == j

    def test_landajuela_orbit_candidate(self):
        cfg = MdpConfig.pendulum("E", 0.05, reward_action="raw")
        c = builtin("landajuela_a1")
        traj = dynamics.rollout(cfg, c, (3.94871, 8.0), 200)
        cand = detect_periodic_candidate(traj.states[:120], cfg, c)
        assert cand is not None
        assert (cand.m, cand.j) == (28, 1)

    def test_min_period_skips_short_lags(self):
        cfg = MdpConfig.pendulum("E", 0.01)
        c = builtin("landajuela_a1")
        traj = dynamics.rollout(cfg, c, (3.0, 0.0), 600)
        for oc in periodic_candidates(traj.states, cfg, c, tol=0.05, limit=50):
            assert oc.m * cfg.h >= 0.5


class TestFineTune:
    def test_proportional_controller_improves(self):
        spec = ExpressionTree.from_text("-0.0 * x1")
        cfg = MdpConfig.pendulum("SI", 0.05, episode_len=100)
        tuned = fine_tune(spec, cfg, n_episodes=10, seed=0, generations=15)
        ics = dynamics.sample_initial_states(cfg, 10, np.random.default_rng(0))
        assert mean_return(cfg, tuned, ics) > mean_return(cfg, spec, ics)

    def test_never_worse(self):
        spec = builtin("9A_AG")
        cfg = MdpConfig.pendulum("SI", 0.05, episode_len=50)
        tuned = fine_tune(spec, cfg, n_episodes=5, seed=1, generations=3)
        ics = dynamics.sample_initial_states(cfg, 5, np.random.default_rng(1))
        assert mean_return(cfg, tuned, ics) >= mean_return(cfg, spec, ics)

    def test_no_constants(self):
        with pytest.raises(ValueError):
            fine_tune(ExpressionTree.from_text("x1"), PEND_SI)


def test_accumulated_penalty_is_negated_return():
    c = builtin("9A_CMA")
    ics = np.array([[3.14159, 0.0], [1.0, -2.0]])
    pen = PenaltySpec.for_system("pendulum")
    got = accumulated_penalty(PEND_SI, c, pen, ics, 200)
    want = [-dynamics.rollout(PEND_SI, c, ic, 200).total_return for ic in ics]
    np.testing.assert_allclose(got, want, rtol=1e-12)
