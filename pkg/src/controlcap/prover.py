"""Computer-assisted existence proofs for periodic orbits of the closed-loop maps.

A period-``m`` orbit with ``j`` signed full rotations is a zero of

    G1(x_0..x_{m-1}) = (x_0 - g(x_{m-1}) + 2*pi*j*e_theta,  x_i - g(x_{i-1}) for i >= 1)

where ``g`` is one closed-loop step. ``G2`` additionally frees the step size
``h`` and pins the phase with ``theta_0 - anchor``. A Newton refinement finds an
approximate zero ``x_bar`` and :func:`verify_contraction` checks the
Newton-Kantorovich style conditions

    Z0 + Z2 < 1  and  Y / (1 - Z0 - Z2) <= r_star

with rigorous interval bounds, which proves a unique zero within radius ``r``.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import dynamics
from .autodiff import Jet, jacobian as ad_jacobian
from .controllers import ControllerSpec, spec_from_dict
from .dynamics import MdpConfig
from .errors import (
    CertificateInvalid,
    ContractionFailed,
    GuardError,
    NoConvergence,
    SingularJacobian,
    SmoothnessUnverifiable,
)
from .interval_core import (
    TWO_PI_HI,
    TWO_PI_LO,
    Interval,
    as_interval,
    identity_minus,
    matrix_norm_inf,
    norm_inf,
    rigorous_matmul,
)

R_STAR_LADDER = (1e-4, 1e-5, 1e-6)


# vector maps ----------------------------------------------------------------------

def _roll(v, shift=1):
    if isinstance(v, Interval):
        return Interval._new(np.roll(v.lo, shift), np.roll(v.hi, shift))
    return np.roll(v, shift)


def _two_pi_times(j: int, interval: bool):
    if not interval:
        return 2.0 * math.pi * j
    return Interval(TWO_PI_LO, TWO_PI_HI) * float(j)


class FunctionMap:
    """Adapter turning ``f(list of scalars) -> list of scalars`` into a vector map."""

    def __init__(self, f: Callable):
        self.f = f

    def __call__(self, X):
        if isinstance(X, Interval):
            out = self.f([X[i] for i in range(len(X))])
            return Interval.stack([as_interval(v) for v in out])
        X = np.asarray(X, dtype=float)
        return np.array([float(v) for v in self.f([float(v) for v in X])])

    def jacobian(self, X):
        return ad_jacobian(self.f, X)


def as_vector_map(G):
    return G if hasattr(G, "jacobian") else FunctionMap(G)


class OrbitMap:
    """G1 (fixed step) or G2 (free step, phase pinned) for one closed-loop system.

    Unknowns are ordered ``(h?, x_0, ..., x_{m-1})`` with each ``x_i`` a full
    state vector. Evaluation is vectorized over the ``m`` orbit points and the
    Jacobian is assembled from per-step ``p x p`` blocks computed with jets.
    """

    def __init__(self, config: MdpConfig, controller, m: int, j: int,
                 variable_h: bool = False, anchor: Optional[float] = None):
        if m < 1:
            raise ValueError("period must be positive")
        if variable_h and anchor is None:
            raise ValueError("the variable-step map needs an anchor")
        self.config = config
        self.controller = controller
        self.m = int(m)
        self.j = int(j)
        self.variable_h = bool(variable_h)
        self.anchor = None if anchor is None else float(anchor)
        self.p = config.state_dim
        self.angle = config.angle_index

    @property
    def dim(self) -> int:
        return self.p * self.m + (1 if self.variable_h else 0)

    def _split(self, X):
        if self.variable_h:
            return X[0], X[1:]
        return self.config.h, X

    def _components(self, Z):
        """List of p arrays, component c holding x_i[c] for i = 0..m-1."""
        return [Z[c:: self.p] for c in range(self.p)]

    def pack(self, states, h: Optional[float] = None) -> np.ndarray:
        flat = np.asarray(states, dtype=float).reshape(-1)
        if self.variable_h:
            return np.concatenate([[self.config.h if h is None else h], flat])
        return flat

    def states_of(self, X) -> np.ndarray:
        _, Z = self._split(np.asarray(X, dtype=float))
        return Z.reshape(self.m, self.p)

    def _step(self, comps, h):
        return dynamics.step(self.config, tuple(comps), self.controller, h)

    def __call__(self, X):
        interval = isinstance(X, Interval)
        if not interval:
            X = np.asarray(X, dtype=float)
        h, Z = self._split(X)
        comps = self._components(Z)
        prev = [_roll(c) for c in comps]
        gx = self._step(prev, h)
        rows = [c - g for c, g in zip(comps, gx)]
        if self.j != 0:
            shift = np.zeros(self.m)
            shift[0] = 1.0
            a = self.angle
            rows[a] = rows[a] + _two_pi_times(self.j, interval) * shift
        if interval:
            out = Interval.stack(rows, axis=1).reshape(-1)
            if self.variable_h:
                eta = Z[self.angle] - self.anchor
                out = Interval.concatenate([eta.reshape(1), out])
            return out
        out = np.stack(rows, axis=1).reshape(-1)
        if self.variable_h:
            out = np.concatenate([[Z[self.angle] - self.anchor], out])
        return out

    def jacobian(self, X):
        interval = isinstance(X, Interval)
        if not interval:
            X = np.asarray(X, dtype=float)
        h, Z = self._split(X)
        comps = self._components(Z)
        prev = [_roll(c) for c in comps]
        k = self.p + (1 if self.variable_h else 0)
        values = list(prev)
        if self.variable_h:
            values.append(h.broadcast_to((self.m,)) if interval else np.full(self.m, float(h)))
        seeds = Jet.variables(values)
        h_arg = seeds[self.p] if self.variable_h else h
        out = self._step(seeds[: self.p], h_arg)

        m, p = self.m, self.p
        off = 1 if self.variable_h else 0
        n = self.dim
        rows_idx = []
        cols_idx = []
        part_idx = []  # (output component, partial index)
        for i in range(m):
            src = (i - 1) % m
            for a in range(p):
                r = off + i * p + a
                for b in range(p):
                    rows_idx.append(r)
                    cols_idx.append(off + src * p + b)
                    part_idx.append((a, b, i))
                if self.variable_h:
                    rows_idx.append(r)
                    cols_idx.append(0)
                    part_idx.append((a, p, i))
        rows_idx = np.array(rows_idx)
        cols_idx = np.array(cols_idx)
        pa = np.array([t[0] for t in part_idx])
        pb = np.array([t[1] for t in part_idx])
        pi = np.array([t[2] for t in part_idx])

        def partial_matrix(getter):
            # getter(jet) -> array of shape (k, m)
            stacked = np.stack([getter(out[a]) for a in range(p)])  # (p, k, m)
            return stacked[pa, pb, pi]

        base = np.eye(n)
        if self.variable_h:
            base[0, :] = 0.0
            base[0, 1 + self.angle] = 1.0
        if interval:
            lo_vals = partial_matrix(lambda jt: _partials(jt, k, m, interval).lo)
            hi_vals = partial_matrix(lambda jt: _partials(jt, k, m, interval).hi)
            lo = np.zeros((n, n))
            hi = np.zeros((n, n))
            lo[rows_idx, cols_idx] = -hi_vals
            hi[rows_idx, cols_idx] = -lo_vals
            return Interval._new(lo, hi) + base
        vals = partial_matrix(lambda jt: _partials(jt, k, m, interval))
        M = np.zeros((n, n))
        M[rows_idx, cols_idx] = -vals
        return M + base


def _partials(y, k, m, interval):
    """Partials of one step output as a (k, m) array (zeros for constants)."""
    if isinstance(y, Jet):
        P = y.partials
        if interval:
            P = as_interval(P)
            return P.broadcast_to((k, m)) if P.shape != (k, m) else P
        return np.broadcast_to(np.asarray(P, dtype=float), (k, m))
    z = np.zeros((k, m))
    return Interval.point(z) if interval else z


def build_G1(config: MdpConfig, controller, m: int, j: int) -> OrbitMap:
    return OrbitMap(config, controller, m, j)


def build_G2(config: MdpConfig, controller, m: int, j: int, anchor: float) -> OrbitMap:
    return OrbitMap(config, controller, m, j, variable_h=True, anchor=anchor)


# Newton ---------------------------------------------------------------------------

def _safe_norm(F) -> float:
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        return math.inf
    return float(np.max(np.abs(F))) if F.size else 0.0


def _lu(J):
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise SingularJacobian("Jacobian has non-finite entries")
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            return scipy.linalg.lu_factor(J, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
            raise SingularJacobian(f"Jacobian is singular: {exc}") from exc


def newton_refine(G, X0, tol: float = 1e-12, max_iter: int = 50, accept: float = 1e-10):
    """Damped Newton iteration on a float vector map.

    Returns ``(X, residual)`` with ``residual = ||G(X)||_inf``. Stops once the
    residual drops to ``tol``, after ``max_iter`` iterations, or when no damped
    step decreases the residual. Raises :class:`NoConvergence` when the best
    residual is above ``accept``.
    """
    G = as_vector_map(G)
    X = np.array(X0, dtype=float).reshape(-1)

    def resid(Y):
        try:
            F = G(Y)
        except GuardError:
            return None, math.inf
        return F, _safe_norm(F)

    F, res = resid(X)
    if F is None or not math.isfinite(res):
        raise NoConvergence("map not evaluable at the initial guess", X, res)
    for _ in range(max_iter):
        if res <= tol:
            break
        lu = _lu(G.jacobian(X))
        dx = scipy.linalg.lu_solve(lu, F, check_finite=False)
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("Newton step is not finite")
        t = 1.0
        while True:
            Xn = X - t * dx
            Fn, rn = resid(Xn)
            if rn < res or t < 2.0 ** -12:
                break
            t *= 0.5
        if not rn < res:
            break
        X, F, res = Xn, Fn, rn
    if res <= accept:
        return X, res
    raise NoConvergence(f"Newton stalled at residual {res:.3e}", X, res)


# contraction check ------------------------------------------------------------------

def _close_bounds(Y: float, Z0: float, Z2: float, r_star: float):
    """Rigorous check of the radii conditions; returns (ok, r)."""
    s = Interval(Z0) + Interval(Z2)
    if not s.hi < 1.0:
        return False, math.inf
    q = Interval(Y) / (1.0 - s)
    r = float(np.nextafter(q.hi, np.inf))
    test = Interval(Y) + Interval(r) * (s - 1.0)
    ok = bool(test.hi < 0.0) and r <= r_star
    return ok, r


@dataclass
class ProofCertificate:
    """Record of one contraction verification (and, once filled, of the orbit)."""

    Y: float
    Z0: float
    Z2: float
    r_star: float
    r: float
    x_bar: np.ndarray
    contraction_ok: bool
    exact_h: bool = True
    h_enclosure: Optional[Interval] = None
    max_step_reward: Optional[Interval] = None
    step_rewards: Optional[Interval] = None
    config: Optional[MdpConfig] = None
    controller: Optional[ControllerSpec] = None
    m: int = 0
    j: int = 0
    anchor: Optional[float] = None
    newton_residual: float = math.nan
    attempts: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def map_kind(self) -> str:
        return "G1" if self.exact_h else "G2"

    @property
    def states(self) -> np.ndarray:
        """Orbit points (m, p) of the approximate zero."""
        p = self.config.state_dim
        z = self.x_bar if self.exact_h else self.x_bar[1:]
        return np.asarray(z).reshape(self.m, p)

    @property
    def h(self) -> float:
        return self.config.h if self.exact_h else float(self.x_bar[0])

    def state_enclosure(self) -> Interval:
        """Interval hull of the proven orbit points, shape (m, p)."""
        return Interval.ball(self.states, self.r)

    def check_arithmetic(self) -> bool:
        """Recompute the radii conditions from the stored bounds."""
        ok, r_min = _close_bounds(self.Y, self.Z0, self.Z2, self.r_star)
        return ok and r_min <= self.r <= self.r_star

    def to_dict(self) -> dict:
        f = lambda v: repr(float(v))
        return {
            "map": self.map_kind,
            "Y": f(self.Y),
            "Z0": f(self.Z0),
            "Z2": f(self.Z2),
            "r_star": f(self.r_star),
            "r": f(self.r),
            "contraction_ok": bool(self.contraction_ok),
            "x_bar": [f(v) for v in self.x_bar],
            "exact_h": bool(self.exact_h),
            "h_enclosure": None if self.h_enclosure is None else self.h_enclosure.to_json(),
            "max_step_reward": None if self.max_step_reward is None else self.max_step_reward.to_json(),
            "step_rewards": None if self.step_rewards is None else self.step_rewards.to_json(),
            "m": self.m,
            "j": self.j,
            "anchor": None if self.anchor is None else f(self.anchor),
            "newton_residual": f(self.newton_residual),
            "config": None if self.config is None else self.config.to_dict(),
            "controller": None if self.controller is None else self.controller.to_dict(),
            "attempts": self.attempts,
        }

    @classmethod
    def from_dict(cls, d: dict, verify: bool = True) -> "ProofCertificate":
        g = lambda k: float(d[k])
        cert = cls(
            Y=g("Y"), Z0=g("Z0"), Z2=g("Z2"), r_star=g("r_star"), r=g("r"),
            x_bar=np.array([float(v) for v in d["x_bar"]]),
            contraction_ok=bool(d["contraction_ok"]),
            exact_h=bool(d.get("exact_h", True)),
            h_enclosure=None if d.get("h_enclosure") is None else Interval.from_json(d["h_enclosure"]),
            max_step_reward=None if d.get("max_step_reward") is None else Interval.from_json(d["max_step_reward"]),
            step_rewards=None if d.get("step_rewards") is None else Interval.from_json(d["step_rewards"]),
            config=None if d.get("config") is None else MdpConfig.from_dict(d["config"]),
            controller=None if d.get("controller") is None else spec_from_dict(d["controller"]),
            m=int(d.get("m", 0)),
            j=int(d.get("j", 0)),
            anchor=None if d.get("anchor") is None else float(d["anchor"]),
            newton_residual=float(d.get("newton_residual", "nan")),
            attempts=list(d.get("attempts", [])),
        )
        if verify and cert.contraction_ok and not cert.check_arithmetic():
            raise CertificateInvalid("stored bounds do not satisfy the contraction conditions")
        return cert


def verify_contraction(G, x_bar, r_star: float = 1e-4, ladder=R_STAR_LADDER) -> ProofCertificate:
    """Verify the contraction conditions around ``x_bar``.

    ``r_star`` is tried first, then every smaller radius from ``ladder``.
    Raises :class:`ContractionFailed` with the last bounds, or
    :class:`SmoothnessUnverifiable` if every radius hit a guard error.
    """
    G = as_vector_map(G)
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    lu = _lu(G.jacobian(x_bar))
    A = scipy.linalg.lu_solve(lu, np.eye(len(x_bar)), check_finite=False)
    if not np.all(np.isfinite(A)):
        raise SingularJacobian("approximate inverse is not finite")
    xi = Interval.point(x_bar)
    try:
        Y = norm_inf(rigorous_matmul(A, G(xi)))
        DGx = G.jacobian(xi)
    except GuardError as exc:
        raise SmoothnessUnverifiable(f"map not smooth at x_bar: {exc}") from exc
    Z0 = matrix_norm_inf(identity_minus(rigorous_matmul(A, DGx)))

    radii = [r_star] + [r for r in ladder if r < r_star]
    attempts = []
    guard_only = True
    for rs in radii:
        ball = Interval.ball(x_bar, rs)
        try:
            DGb = G.jacobian(ball)
        except GuardError as exc:
            attempts.append({"r_star": rs, "error": type(exc).__name__, "detail": str(exc)})
            continue
        guard_only = False
        Z2 = matrix_norm_inf(rigorous_matmul(A, DGb - DGx))
        ok, r = _close_bounds(Y, Z0, Z2, rs)
        attempts.append({"r_star": rs, "Y": Y, "Z0": Z0, "Z2": Z2, "ok": ok})
        if ok:
            return ProofCertificate(Y=Y, Z0=Z0, Z2=Z2, r_star=rs, r=r, x_bar=x_bar,
                                    contraction_ok=True, attempts=attempts)
    if guard_only:
        raise SmoothnessUnverifiable(f"guard errors at every radius: {attempts}")
    exc = ContractionFailed("contraction conditions not met", bounds=attempts[-1])
    exc.attempts = attempts
    raise exc


# orbits -------------------------------------------------------------------------------

@dataclass
class OrbitCandidate:
    """Approximate periodic orbit: ``m`` consecutive states and rotation count ``j``."""

    config: MdpConfig
    controller: ControllerSpec
    m: int
    j: int
    states: np.ndarray
    h_variable: bool = False
    gap: float = math.nan
    start_index: int = 0
    residual: float = math.nan

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(self.m, self.config.state_dim)
        if self.m < 1:
            raise ValueError("period must be positive")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("candidate states must be finite")
        if math.isnan(self.residual):
            G = build_G1(self.config, self.controller, self.m, self.j)
            try:
                self.residual = _safe_norm(G(self.states.reshape(-1)))
            except GuardError:
                self.residual = math.inf

    @property
    def direction(self) -> str:
        return "+" if self.j > 0 else "-" if self.j < 0 else "0"

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "j": self.j,
            "h_variable": self.h_variable,
            "gap": repr(float(self.gap)),
            "residual": repr(float(self.residual)),
            "start_index": self.start_index,
            "states": [[repr(float(v)) for v in row] for row in self.states],
            "config": self.config.to_dict(),
            "controller": self.controller.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrbitCandidate":
        return cls(
            config=MdpConfig.from_dict(d["config"]),
            controller=spec_from_dict(d["controller"]),
            m=int(d["m"]),
            j=int(d["j"]),
            states=np.array([[float(v) for v in row] for row in d["states"]]),
            h_variable=bool(d.get("h_variable", False)),
            gap=float(d.get("gap", "nan")),
            start_index=int(d.get("start_index", 0)),
        )


def fundamental_period(states: np.ndarray, j: int, angle: int, tol: float = 1e-8):
    """Smallest divisor period of an orbit (m, p) consistent with its rotation count."""
    m = len(states)
    for d in range(1, m):
        if m % d or (j * d) % m:
            continue
        jd = j * d // m
        shift = np.zeros(states.shape[1])
        shift[angle] = 2.0 * math.pi * jd
        if np.max(np.abs(states[d:] - states[:-d] - shift)) <= tol:
            return d, jd
    return m, j


def orbit_reward_bounds(cert: ProofCertificate):
    """Per-step reward enclosures on the proven orbit ball and an enclosure of their max.

    Returns ``(per_step, max_enclosure)`` where ``per_step`` has shape ``(m,)``.
    """
    if not cert.contraction_ok:
        raise ValueError("reward bounds need a verified certificate")
    cfg = cert.config
    box = cert.state_enclosure()
    comps = tuple(box[:, c] for c in range(cfg.state_dim))
    action = dynamics.controller_action(cfg, comps, cert.controller)
    rewards = dynamics.reward(cfg, comps, action)
    rewards = as_interval(rewards).broadcast_to((cert.m,))
    top = Interval(np.max(rewards.lo), np.max(rewards.hi))
    return rewards, top


class ProofFailed(Exception):
    """All proof modes failed; ``attempts`` lists what happened in each."""

    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


def prove_orbit(candidate: OrbitCandidate, r_star: float = 1e-4, variable_h: Optional[bool] = None,
                ladder=R_STAR_LADDER, reduce: bool = True) -> ProofCertificate:
    """Refine and verify a candidate: fixed step first, variable step as fallback.

    ``variable_h=None`` tries G1 then G2; ``True``/``False`` forces one map.
    One re-centering Newton pass is allowed before a map is given up.
    """
    t0 = time.perf_counter()
    cfg = candidate.config
    modes = [False, True] if variable_h is None else [bool(variable_h)]
    attempts = []
    for var in modes:
        m, j, states = candidate.m, candidate.j, candidate.states
        anchor = float(states[0, cfg.angle_index]) if var else None
        G = OrbitMap(cfg, candidate.controller, m, j, variable_h=var, anchor=anchor)
        label = "G2" if var else "G1"
        try:
            X, res = newton_refine(G, G.pack(states))
            if reduce:
                st = G.states_of(X)
                d, jd = fundamental_period(st, j, cfg.angle_index)
                if d < m:
                    m, j = d, jd
                    G = OrbitMap(cfg, candidate.controller, m, j, variable_h=var, anchor=anchor)
                    h = float(X[0]) if var else None
                    X, res = newton_refine(G, G.pack(st[:m], h))
        except (NoConvergence, SingularJacobian) as exc:
            attempts.append({"map": label, "stage": "newton", "error": type(exc).__name__, "detail": str(exc)})
            continue
        cert = None
        for recenter in range(2):
            try:
                cert = verify_contraction(G, X, r_star, ladder)
                break
            except (ContractionFailed, SmoothnessUnverifiable, SingularJacobian) as exc:
                attempts.append({"map": label, "stage": "verify", "error": type(exc).__name__,
                                 "detail": str(exc)[:500]})
                if recenter == 0:
                    try:
                        X, res = newton_refine(G, X, tol=0.0, max_iter=3)
                    except (NoConvergence, SingularJacobian):
                        break
        if cert is None:
            continue
        cert.config = cfg
        cert.controller = candidate.controller
        cert.m, cert.j = m, j
        cert.exact_h = not var
        cert.anchor = anchor
        cert.newton_residual = res
        if var:
            cert.h_enclosure = Interval.ball(X[0], cert.r)
        cert.attempts = attempts + [{"map": label, "stage": "verify", "ok": True, "bounds": cert.attempts}]
        per_step, top = orbit_reward_bounds(cert)
        cert.step_rewards = per_step
        cert.max_step_reward = top
        cert.elapsed = time.perf_counter() - t0
        return cert
    raise ProofFailed("no map could be verified", attempts)


def periodicity_defect(cert: ProofCertificate) -> float:
    """Brute-force check: iterate the float map m times from the first orbit point.

    Returns the sup-norm distance between the endpoint and the rotated start.
    """
    cfg = cert.config.with_(h=cert.h)
    s = tuple(float(v) for v in cert.states[0])
    for _ in range(cert.m):
        s = tuple(float(v) for v in dynamics.step(cfg, s, cert.controller))
    target = np.array(cert.states[0], dtype=float)
    target[cfg.angle_index] += 2.0 * math.pi * cert.j
    return float(np.max(np.abs(np.array(s) - target)))
