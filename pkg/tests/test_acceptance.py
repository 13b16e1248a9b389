"""Exit criteria. Each test records one PASS/FAIL line shown in the terminal summary.

Run with ``pytest tests/test_acceptance.py -v``; the full set takes a few minutes.
"""
import json
import math
import time

import mpmath
import numpy as np
import pytest

from conftest import ACCEPTANCE
from controlcap import dynamics
from controlcap.autodiff import jacobian
from controlcap.certify import accumulated_penalty_bounds, orbit_is_persistent, rigorous_rollout
from controlcap.controllers import builtin
from controlcap.dynamics import MdpConfig
from controlcap.errors import DivisionByZeroInterval, HorizonTruncated, NonSmoothCrossing
from controlcap.interval_core import Interval, clip_guarded
from controlcap.prover import OrbitCandidate, ProofCertificate, ProofFailed, periodicity_defect, prove_orbit
from controlcap.reporting import cmd_eval_returns, cmd_pipeline, orbit_distance_to, same_orbit
from controlcap.search import PenaltySpec, SearchConfig, periodic_candidates, search_persistent

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

LANDAJUELA = builtin("landajuela_a1")

# (scheme, h, initial state, period) of the tabulated Landajuela orbits
LANDAJUELA_ORBITS = [
    ("E", 0.05, (3.94871, 8.0), 28),
    ("E", 0.01, (0.69262, 1.59285), 166),
    ("E", 0.005, (0.69672, 1.42118), 358),
    ("SI", 0.01, (0.20564, 1.02174), 202),
    ("SI", 0.005, (0.69922, 1.23635), 398),
]
AG9_ICS = [(17.85968, -2.02001), (1.40931, 3.17237), (12.85921, -3.10134), (19.65676, -5.18122),
           (17.27346, -3.56275)]

# certificates proven along the way, re-checked by the property suite
PROVEN = []


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def table_orbit(scheme, h, ic, m, controller=LANDAJUELA, reward_action="raw"):
    cfg = MdpConfig.pendulum(scheme, h, reward_action=reward_action)
    traj = dynamics.rollout(cfg, controller, ic, m + 1)
    j = int(round((traj.states[m, 0] - traj.states[0, 0]) / (2 * math.pi)))
    return prove_orbit(OrbitCandidate(cfg, controller, m, j, traj.states[:m]))


def enclosure_distance(iv: Interval, value: float) -> float:
    return max(abs(float(iv.lo) - value), abs(float(iv.hi) - value))


def test_criterion_1_orbit_reproduction():
    t0 = time.perf_counter()
    cfg = MdpConfig.pendulum("E", 0.05, reward_action="raw")
    res = cmd_pipeline(cfg, LANDAJUELA, SearchConfig.for_system("pendulum"), top_k=5)
    PROVEN.extend(res.certificates)
    hits = [c for c in res.certificates
            if c.contraction_ok and c.m == 28 and c.j > 0
            and orbit_distance_to(c, (3.94871, 8.0)) <= 1e-2
            and enclosure_distance(c.max_step_reward, -0.64228) <= 1e-2]
    found = sorted({(c.m, c.j) for c in res.certificates})
    detail = f"proven (m, j) = {found}; matching m=28 orbits: {len(hits)}"
    if hits:
        c = hits[0]
        detail += (f"; distance {orbit_distance_to(c, (3.94871, 8.0)):.2e}, max reward "
                   f"[{float(c.max_step_reward.lo):.6f}, {float(c.max_step_reward.hi):.6f}]")
    detail += f"; {time.perf_counter() - t0:.1f}s"
    assert record(1, hits, detail)


def test_criterion_2_per_step_bound():
    tabulated = [table_orbit(*row) for row in LANDAJUELA_ORBITS]
    PROVEN.extend(tabulated)
    # add distinct orbits the pipeline proved at the native step; fixed points near the
    # goal are not persistent and are left out
    extra = []
    for c in PROVEN:
        if c.config.h == 0.05 and c.controller.name == LANDAJUELA.name and orbit_is_persistent(c):
            if not any(same_orbit(c, o) for o in tabulated + extra):
                extra.append(c)
    certs = tabulated + extra
    worst = max(float(c.max_step_reward.hi) for c in certs)
    parts = ", ".join(f"{c.config.scheme} h={c.config.h} m={c.m}: {float(c.max_step_reward.hi):.5f}"
                      for c in tabulated)
    if extra:
        worst_extra = max(float(c.max_step_reward.hi) for c in extra)
        parts += f"; {len(extra)} more native-step orbits, worst {worst_extra:.5f}"
    ok = worst <= -0.198 and all(orbit_is_persistent(c) for c in tabulated)
    assert record(2, ok, f"worst upper bound {worst:.5f} ({parts})")


def test_criterion_3_9a_ag_orbit():
    cfg = MdpConfig.pendulum("SI", 0.05)
    ctrl = builtin("9A_AG")
    found = []
    for ic in AG9_ICS:
        traj = dynamics.rollout(cfg, ctrl, ic, 300)
        for oc in periodic_candidates(traj.states, cfg, ctrl, limit=10):
            if not 35 <= oc.m <= 38:
                continue
            try:
                cert = prove_orbit(oc)
            except ProofFailed:
                continue
            found.append(cert)
            break
    PROVEN.extend(found)
    lo, hi = -0.231 - 2e-2, -0.180 + 2e-2
    good = [c for c in found if 35 <= c.m <= 38 and lo <= float(c.max_step_reward.lo)
            and float(c.max_step_reward.hi) <= hi]
    parts = ", ".join(f"m={c.m} j={c.j} {float(c.max_step_reward.mid):.5f}" for c in found)
    assert record(3, good, f"{len(good)}/{len(AG9_ICS)} orbits in band ({parts})")


def test_criterion_4_return_metrics():
    table = cmd_eval_returns(MdpConfig.pendulum("SI", 0.05), LANDAJUELA, n_episodes=100, seed=0,
                             step_sizes=[0.05])
    si, e = table.cell("SI", 0.05).mean, table.cell("E", 0.05).mean
    disc = table.discrepancies[0.05][0]
    ok = -250 <= si <= -90 and e <= -450 and disc >= 300
    assert record(4, ok, f"SI mean {si:.1f}, E mean {e:.1f}, E/SI discrepancy {disc:.1f}")


def test_criterion_5_persistent_search():
    t0 = time.perf_counter()
    cfg = MdpConfig.pendulum("SI", 0.05)
    cands = search_persistent(cfg, builtin("9A_CMA"), PenaltySpec.for_system("pendulum"),
                              SearchConfig.for_system("pendulum"))
    best = cands[0]
    ok = best.accumulated_penalty >= 1300
    assert record(5, ok, f"best accumulated penalty {best.accumulated_penalty:.2f} at "
                         f"{tuple(round(v, 5) for v in best.ic)}; {time.perf_counter() - t0:.1f}s")


def test_criterion_6_cartpole_penalty():
    t0 = time.perf_counter()
    ctrl = builtin("cartpole_k21")
    pen = PenaltySpec.for_system("cartpole")
    si = MdpConfig.cartpole("SI", 0.01, terminations=False)
    best = search_persistent(si, ctrl, pen, SearchConfig.for_system("cartpole"))[0].accumulated_penalty
    e = MdpConfig.cartpole("E", 0.01, terminations=False)
    traj = dynamics.rollout(e, ctrl, (-0.449, 0.498, 2.9, -0.498), 2000)
    total = float(sum(pen(e, tuple(traj.states[i]), traj.actions[i]) for i in range(traj.steps)))
    rel = abs(total - 26674.106) / 26674.106
    # the tabulated IC is rounded to three decimals; show how much that rounding alone moves the sum
    rng = np.random.default_rng(0)
    box = np.array([-0.449, 0.498, 2.9, -0.498]) + rng.uniform(-5e-4, 5e-4, (200, 4))
    spread = dynamics.batch_accumulate(e, ctrl, box, 2000, lambda cfg, s, a: pen(cfg, s, a))
    ok = best >= 3.0e4 and rel <= 1e-2
    assert record(6, ok, f"SI search best {best:.1f} (need >= 30000); E rollout penalty {total:.3f} vs "
                         f"26674.106, relative error {rel:.3f} (need <= 0.01; rounding box of the IC gives "
                         f"{spread.min():.0f} to {spread.max():.0f}); {time.perf_counter() - t0:.1f}s")


def test_criterion_7_wrapping():
    cfg = MdpConfig.pendulum("SI", 0.05)
    ctrl = builtin("9A_CMA")
    cert = rigorous_rollout(cfg, ctrl, (3.14159, 0.0), 1000)
    radii = cert.radii
    monotone = bool(np.all(np.diff(radii[1:]) >= 0))
    try:
        accumulated_penalty_bounds(cert, PenaltySpec.for_system("pendulum"))
        partial, truncated = None, False
    except HorizonTruncated as exc:
        partial, truncated = exc.partial, True
    fl = dynamics.rollout(cfg, ctrl, (3.14159, 0.0), cert.steps)
    mid = float(cert.return_enclosure.mid)
    rel = abs(mid - fl.total_return) / abs(fl.total_return)
    contains = partial is not None and partial.contains(-fl.total_return)
    ok = monotone and cert.steps < 1000 and truncated and contains and rel <= 1e-6
    assert record(7, ok, f"{cert.steps} steps certified ({cert.abort_reason}); monotone radii {monotone}; "
                         f"partial penalty [{float(partial.lo):.4f}, {float(partial.hi):.4f}]; "
                         f"midpoint vs float relative error {rel:.2e}")


# property suites ---------------------------------------------------------------------------

_UNARY = {
    "sin": (lambda X: X.sin(), mpmath.sin),
    "cos": (lambda X: X.cos(), mpmath.cos),
    "tanh": (lambda X: X.tanh(), mpmath.tanh),
    "sqr": (lambda X: X.sqr(), lambda x: x * x),
    "abs": (lambda X: abs(X), abs),
}
_BINARY = {
    "add": (lambda X, Y: X + Y, lambda x, y: x + y),
    "sub": (lambda X, Y: X - Y, lambda x, y: x - y),
    "mul": (lambda X, Y: X * Y, lambda x, y: x * y),
    "div": (lambda X, Y: X / Y, lambda x, y: x / y),
}


def containment_violations(n_checks: int, seed: int = 0) -> int:
    mpmath.mp.prec = 200
    rng = np.random.default_rng(seed)
    names = list(_UNARY) + list(_BINARY) + ["arccos"]
    bad = 0
    for _ in range(n_checks):
        name = names[rng.integers(len(names))]
        if name == "arccos":
            a = rng.uniform(-1, 1)
            b = min(1.0, a + rng.uniform(0, 0.5))
        else:
            a = rng.uniform(-30, 30)
            b = a + rng.uniform(0, 5) * rng.choice([0.0, 1e-8, 1.0])
        x = float(np.clip(a + rng.random() * (b - a), a, b))
        X = Interval(a, b)
        if name in _UNARY:
            f, g = _UNARY[name]
            Z, z = f(X), g(mpmath.mpf(x))
        elif name == "arccos":
            Z, z = X.arccos(), mpmath.acos(mpmath.mpf(x))
        else:
            c = rng.uniform(-30, 30)
            d = c + rng.uniform(0, 5)
            if name == "div" and c <= 0 <= d:
                c, d = 0.5 + abs(c), 0.5 + abs(c) + (d - c)
            y = float(np.clip(c + rng.random() * (d - c), c, d))
            f, g = _BINARY[name]
            Z, z = f(X, Interval(c, d)), g(mpmath.mpf(x), mpmath.mpf(y))
        if not mpmath.mpf(float(Z.lo)) <= z <= mpmath.mpf(float(Z.hi)):
            bad += 1
    return bad


def ad_fd_max_error(n_points: int = 100, seed: int = 0) -> float:
    """Max entry error of closed-loop step Jacobians vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [(MdpConfig.pendulum(s, 0.05), builtin("9A_AG"), [(-3, 3), (-6, 6)]) for s in ("E", "SI")]
    cases += [(MdpConfig.cartpole(s, 0.01), builtin("cartpole_k21"), [(-2, 2), (-2, 2), (-0.3, 0.3), (-1, 1)])
              for s in ("E", "SI")]
    for cfg, ctrl, box in cases:
        done = 0
        while done < n_points:
            x = np.array([rng.uniform(lo, hi) for lo, hi in box])
            a = float(dynamics.controller_action(cfg, tuple(x), ctrl))
            clip_lo, clip_hi = cfg.action_clip
            if min(abs(a - clip_lo), abs(a - clip_hi)) < 1e-2 or not clip_lo < a < clip_hi:
                continue
            nxt = dynamics.step(cfg, tuple(x), ctrl)
            if cfg.velocity_clip is not None:
                v = float(nxt[cfg.state_dim - 1])
                if min(abs(v - cfg.velocity_clip[0]), abs(v - cfg.velocity_clip[1])) < 1e-2:
                    continue

            def f(v):
                return list(dynamics.step(cfg, tuple(v), ctrl))

            J = jacobian(f, x)
            fd = np.empty_like(J)
            for k in range(len(x)):
                e = np.zeros_like(x)
                e[k] = 1e-6
                fd[:, k] = (np.array(f(x + e), float) - np.array(f(x - e), float)) / 2e-6
            worst = max(worst, float(np.max(np.abs(J - fd) / np.maximum(1.0, np.abs(J)))))
            done += 1
    return worst


def test_criterion_8_property_suites():
    certs = list(PROVEN) or [table_orbit(*LANDAJUELA_ORBITS[0])]
    violations = containment_violations(10_000)
    ad_err = ad_fd_max_error(100)
    closure_bad = sum(periodicity_defect(c) > 2 * c.r + 1e-8 for c in certs)
    reload_bad = 0
    for c in certs:
        try:
            again = ProofCertificate.from_dict(json.loads(json.dumps(c.to_dict())))
            reload_bad += not again.check_arithmetic()
        except Exception:
            reload_bad += 1
    guards = 0
    try:
        clip_guarded(Interval(7.9, 8.1), -8.0, 8.0)
    except NonSmoothCrossing:
        guards += 1
    try:
        LANDAJUELA.act(MdpConfig.pendulum("E", 0.05), (Interval(1.5, 1.6), Interval(0.0)))
    except DivisionByZeroInterval:
        guards += 1
    ok = violations == 0 and ad_err <= 1e-5 and closure_bad == 0 and reload_bad == 0 and guards == 2
    assert record(8, ok, f"containment violations {violations}/10000; AD vs FD max error {ad_err:.2e}; "
                         f"periodicity failures {closure_bad}/{len(certs)}; reload failures "
                         f"{reload_bad}/{len(certs)}; guard errors raised {guards}/2")
