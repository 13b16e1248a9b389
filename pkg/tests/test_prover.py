import json
import math

import numpy as np
import pytest

from controlcap import dynamics, generic
from controlcap.controllers import builtin, zero_controller
from controlcap.dynamics import MdpConfig
from controlcap.errors import CertificateInvalid, ContractionFailed, NoConvergence, SingularJacobian, SmoothnessUnverifiable
from controlcap.prover import (
    FunctionMap,
    OrbitCandidate,
    ProofCertificate,
    ProofFailed,
    build_G1,
    build_G2,
    fundamental_period,
    newton_refine,
    periodicity_defect,
    prove_orbit,
    verify_contraction,
)

LANDAJUELA = builtin("landajuela_a1")
E05_RAW = MdpConfig.pendulum("E", 0.05, reward_action="raw")


def orbit_candidate(cfg, ctrl, ic, m, warmup=0):
    """Candidate built from m consecutive rollout states, j read off the angle drift."""
    traj = dynamics.rollout(cfg, ctrl, ic, warmup + m + 1)
    S = traj.states[warmup: warmup + m + 1]
    j = int(round((S[m, 0] - S[0, 0]) / (2 * math.pi)))
    return OrbitCandidate(cfg, ctrl, m, j, S[:m])


@pytest.fixture(scope="module")
def landajuela_cert():
    return prove_orbit(orbit_candidate(E05_RAW, LANDAJUELA, (3.94871, 8.0), 28))


class TestMaps:
    def test_G1_vanishes_at_fixed_point(self):
        cfg = MdpConfig.pendulum("SI", 0.05)
        G = build_G1(cfg, zero_controller(), 3, 0)
        X = G.pack(np.tile([math.pi, 0.0], (3, 1)))
        assert np.max(np.abs(G(X))) < 1e-12

    def test_single_perturbation_touches_two_blocks(self):
        cfg = MdpConfig.pendulum("SI", 0.05)
        G = build_G1(cfg, zero_controller(), 4, 0)
        S = np.tile([math.pi, 0.0], (4, 1))
        S[1, 0] += 1e-3
        F = G(G.pack(S)).reshape(4, 2)
        nonzero = np.where(np.any(np.abs(F) > 1e-14, axis=1))[0]
        assert list(nonzero) == [1, 2]

    def test_G2_matches_G1_with_anchor_row(self, landajuela_cert):
        c = landajuela_cert
        G1 = build_G1(c.config, c.controller, c.m, c.j)
        G2 = build_G2(c.config, c.controller, c.m, c.j, anchor=c.states[0, 0])
        F1 = G1(c.x_bar)
        F2 = G2(G2.pack(c.states))
        assert F2[0] == 0.0
        np.testing.assert_allclose(F2[1:], F1, atol=1e-15)
        G2s = build_G2(c.config, c.controller, c.m, c.j, anchor=c.states[0, 0] - 0.1)
        assert G2s(G2s.pack(c.states))[0] == pytest.approx(0.1)

    def test_jacobian_matches_finite_differences(self):
        cfg = MdpConfig.pendulum("SI", 0.05)
        for G in (build_G1(cfg, builtin("9A_AG"), 3, 0),
                  build_G2(cfg, builtin("9A_AG"), 3, 0, anchor=0.4)):
            rng = np.random.default_rng(0)
            X = G.pack(rng.uniform(-0.5, 0.5, size=(3, 2)), 0.05)
            J = G.jacobian(X)
            fd = np.empty_like(J)
            for k in range(len(X)):
                e = np.zeros_like(X)
                e[k] = 1e-6
                fd[:, k] = (G(X + e) - G(X - e)) / 2e-6
            np.testing.assert_allclose(J, fd, atol=1e-6)


class TestNewton:
    def test_sqrt_two(self):
        G = FunctionMap(lambda v: [generic.sqr(v[0]) - 2.0])
        X, res = newton_refine(G, [1.0])
        assert abs(X[0] - math.sqrt(2)) <= 1e-12

    def test_singular(self):
        G = FunctionMap(lambda v: [generic.sqr(v[0]) + 1.0])
        with pytest.raises(SingularJacobian):
            newton_refine(G, [0.0])

    def test_no_root(self):
        G = FunctionMap(lambda v: [generic.sqr(v[0]) + 1.0])
        with pytest.raises((NoConvergence, SingularJacobian)):
            newton_refine(G, [0.5])

    def test_linear_map_is_proven_exactly(self):
        G = FunctionMap(lambda v: [2.0 * v[0], 3.0 * v[1] - v[0]])
        cert = verify_contraction(G, [0.0, 0.0])
        assert cert.contraction_ok
        assert cert.Y <= 1e-150 and cert.Z2 <= 1e-150
        assert cert.r <= cert.r_star


    def test_kink_at_zero_is_unverifiable(self):
        G = FunctionMap(lambda v: [generic.clip(v[0], -1.0, 1.0) + v[0] - 2.0])
        with pytest.raises(SmoothnessUnverifiable):
            verify_contraction(G, [1.0])


class TestOrbitProofs:
    def test_landajuela_orbit(self, landajuela_cert):
        c = landajuela_cert
        assert c.contraction_ok and c.map_kind == "G1"
        assert (c.m, c.j) == (28, 1)
        # the tabulated value is rounded to five decimals
        assert abs(float(c.max_step_reward.mid) - (-0.64228)) <= 5e-6
        assert float(c.max_step_reward.width) <= 1e-3
        assert c.check_arithmetic()

    def test_periodicity_oracle(self, landajuela_cert):
        assert periodicity_defect(landajuela_cert) <= 2 * landajuela_cert.r + 1e-8

    def test_unrefined_guess_fails_contraction(self, landajuela_cert):
        c = landajuela_cert
        G = build_G1(c.config, c.controller, c.m, c.j)
        with pytest.raises(ContractionFailed):
            verify_contraction(G, c.x_bar + 1e-2, ladder=())

    @pytest.mark.parametrize("scheme,h,ic,m", [
        ("E", 0.01, (0.69262, 1.59285), 166),
        ("SI", 0.01, (0.20564, 1.02174), 202),
    ])
    def test_small_step_orbits_stay_below_reward_cap(self, scheme, h, ic, m):
        cfg = MdpConfig.pendulum(scheme, h, reward_action="raw")
        cert = prove_orbit(orbit_candidate(cfg, LANDAJUELA, ic, m))
        assert float(cert.max_step_reward.hi) <= -0.198

    def test_9a_ag_orbit(self):
        cfg = MdpConfig.pendulum("SI", 0.05)
        cert = prove_orbit(orbit_candidate(cfg, builtin("9A_AG"), (17.85968, -2.02001), 38))
        assert (cert.m, cert.j) == (38, -1)
        assert abs(float(cert.max_step_reward.mid) - (-0.18072)) <= 1e-4

    def test_fundamental_period_reduction(self):
        base = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 1.5]])
        twice = np.vstack([base, base + [2 * math.pi, 0.0]])
        assert fundamental_period(twice, 2, 0) == (3, 1)
        assert fundamental_period(base, 1, 0) == (3, 1)

    def test_equilibrium_is_rejected_as_empty_orbit(self):
        cfg = MdpConfig.pendulum("SI", 0.05)
        cand = OrbitCandidate(cfg, zero_controller(), 1, 0, [[math.pi, 0.0]])
        cert = prove_orbit(cand)
        assert cert.m == 1 and cert.max_step_reward.contains(-math.pi ** 2)


class TestCertificates:
    def test_json_roundtrip(self, landajuela_cert):
        d = json.loads(json.dumps(landajuela_cert.to_dict()))
        again = ProofCertificate.from_dict(d)
        assert again.contraction_ok and again.m == 28
        np.testing.assert_array_equal(again.x_bar, landajuela_cert.x_bar)
        assert again.max_step_reward == landajuela_cert.max_step_reward

    def test_tampered_bounds_rejected(self, landajuela_cert):
        d = landajuela_cert.to_dict()
        d["Z0"] = repr(0.99)
        d["Z2"] = repr(0.5)
        with pytest.raises(CertificateInvalid):
            ProofCertificate.from_dict(d)

    def test_tampered_radius_rejected(self, landajuela_cert):
        d = landajuela_cert.to_dict()
        d["r"] = repr(float(landajuela_cert.r_star) * 10)
        with pytest.raises(CertificateInvalid):
            ProofCertificate.from_dict(d)

    def test_candidate_roundtrip(self):
        cand = orbit_candidate(E05_RAW, LANDAJUELA, (3.94871, 8.0), 28)
        again = OrbitCandidate.from_dict(json.loads(json.dumps(cand.to_dict())))
        np.testing.assert_array_equal(again.states, cand.states)
        assert (again.m, again.j) == (28, 1)

    def test_proof_failed_lists_attempts(self):
        cfg = MdpConfig.pendulum("E", 0.05)
        # three turns in one step would need |omega| far above the velocity clip
        far = OrbitCandidate(cfg, LANDAJUELA, 1, 3, [[0.3, 1.0]])
        with pytest.raises(ProofFailed) as info:
            prove_orbit(far)
        assert info.value.attempts
