"""Rigorous interval rollouts and persistent-solution certificates.

A rollout starts from a thin interval initial state and iterates the
closed-loop map in interval arithmetic. Every step yields enclosures of the
state, the raw action and the reward. Enclosure radii grow under composition
(the wrapping effect), so the rollout stops once any state radius exceeds a cap
and all claims are restricted to the steps actually achieved.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import dynamics, generic
from .controllers import ControllerSpec, spec_from_dict
from .dynamics import CARTPOLE, PENDULUM, MdpConfig
from .errors import GuardError, HorizonTruncated, Indeterminate, IntervalOverflow
from .interval_core import Interval, as_interval, interval_sum

DEFAULT_BLOWUP_CAP = 1e-1
DEFAULT_EPS = {PENDULUM: 1e-2, CARTPOLE: 0.036}


@dataclass
class PersistenceResult:
    """Per-state persistence flags (``None`` = undecidable) and the exit time."""

    flags: list
    T_p: Optional[float]
    exit_step: Optional[int]
    lower_bound: bool
    indeterminate_step: Optional[int] = None


@dataclass
class PersistentCertificate:
    config: MdpConfig
    controller: ControllerSpec
    ic: tuple
    requested_steps: int
    states: Interval  # (steps + 1, p)
    actions: Interval  # (steps,)
    rewards: Interval  # (steps,)
    abort_reason: Optional[str] = None
    blowup_cap: float = DEFAULT_BLOWUP_CAP
    persistence_eps: float = math.nan
    escaped: bool = False
    escape_step: Optional[int] = None
    guards: bool = True
    T_p: Optional[float] = None
    T_p_lower_bound: bool = False

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def horizon_truncated(self) -> bool:
        return self.steps < self.requested_steps

    @property
    def radii(self) -> np.ndarray:
        """Largest component radius of each state enclosure."""
        return np.max(self.states.rad, axis=1)

    @property
    def max_enclosure_radius(self) -> float:
        return float(np.max(self.radii))

    @property
    def return_enclosure(self) -> Interval:
        if self.steps == 0:
            return Interval(0.0)
        return interval_sum(self.rewards)

    @property
    def controller_id(self) -> str:
        return getattr(self.controller, "name", "controller")

    def to_dict(self) -> dict:
        f = lambda v: repr(float(v))
        return {
            "config": self.config.to_dict(),
            "controller_id": self.controller_id,
            "controller": self.controller.to_dict(),
            "ic": [f(v) for v in self.ic],
            "requested_steps": self.requested_steps,
            "steps": self.steps,
            "horizon_truncated": self.horizon_truncated,
            "abort_reason": self.abort_reason,
            "blowup_cap": f(self.blowup_cap),
            "states": self.states.to_json(),
            "actions": self.actions.to_json() if self.steps else [],
            "rewards": self.rewards.to_json() if self.steps else [],
            "return_enclosure": self.return_enclosure.to_json(),
            "T_p": None if self.T_p is None else f(self.T_p),
            "T_p_lower_bound": self.T_p_lower_bound,
            "persistence_eps": f(self.persistence_eps),
            "escaped": self.escaped,
            "escape_step": self.escape_step,
            "guards": self.guards,
            "max_enclosure_radius": f(self.max_enclosure_radius),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PersistentCertificate":
        p = len(d["ic"])
        actions = Interval.from_json(d["actions"]) if d["actions"] else Interval._new(np.zeros(0), np.zeros(0))
        rewards = Interval.from_json(d["rewards"]) if d["rewards"] else Interval._new(np.zeros(0), np.zeros(0))
        return cls(
            config=MdpConfig.from_dict(d["config"]),
            controller=spec_from_dict(d["controller"]),
            ic=tuple(float(v) for v in d["ic"]),
            requested_steps=int(d["requested_steps"]),
            states=Interval.from_json(d["states"]).reshape(-1, p),
            actions=actions,
            rewards=rewards,
            abort_reason=d.get("abort_reason"),
            blowup_cap=float(d.get("blowup_cap", DEFAULT_BLOWUP_CAP)),
            persistence_eps=float(d.get("persistence_eps", "nan")),
            escaped=bool(d.get("escaped", False)),
            escape_step=d.get("escape_step"),
            guards=bool(d.get("guards", True)),
            T_p=None if d.get("T_p") is None else float(d["T_p"]),
            T_p_lower_bound=bool(d.get("T_p_lower_bound", False)),
        )

    def to_csv(self) -> str:
        """Midpoints and radii of every state enclosure, for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.config.state_names
        w.writerow(["step", "t", *[f"{n}_mid" for n in names], *[f"{n}_rad" for n in names],
                    "reward_lo", "reward_hi"])
        mids, rads = self.states.mid, self.states.rad
        for i in range(len(mids)):
            rw = ["", ""] if i >= self.steps else [repr(float(self.rewards.lo[i])), repr(float(self.rewards.hi[i]))]
            w.writerow([i, repr(i * self.config.h), *[repr(float(v)) for v in mids[i]],
                        *[repr(float(v)) for v in rads[i]], *rw])
        return buf.getvalue()


def rigorous_rollout(config: MdpConfig, controller, ic, n_steps: Optional[int] = None,
                     blowup_cap: float = DEFAULT_BLOWUP_CAP, eps: Optional[float] = None,
                     guards: bool = True) -> PersistentCertificate:
    """Interval rollout from a thin (or given interval) initial state.

    Stops early on a guard error (recorded in ``abort_reason``), on numeric
    overflow, or once a state radius exceeds ``blowup_cap``. Cart escapes are
    recorded but do not stop the rollout. With ``guards=False`` clips that
    straddle a breakpoint are enclosed instead of aborting; the enclosures stay
    valid but no smoothness is implied. Division guards always apply.
    """
    clip = generic.clip if guards else generic.clamp
    n = config.episode_len if n_steps is None else int(n_steps)
    if isinstance(ic, Interval):
        s = tuple(ic[k] for k in range(config.state_dim))
        ic_mid = tuple(float(v) for v in ic.mid)
    else:
        ic_mid = tuple(float(v) for v in ic)
        s = tuple(Interval(v) for v in ic_mid)
    states = [Interval.stack(s)]
    actions: List[Interval] = []
    rewards: List[Interval] = []
    abort = None
    escaped = False
    escape_step = None
    for i in range(n):
        try:
            a = as_interval(dynamics.controller_action(config, s, controller))
            r = as_interval(dynamics.reward(config, s, a))
            nxt = tuple(as_interval(v) for v in dynamics.step_with_action(config, s, a, clip=clip))
        except GuardError as exc:
            abort = f"{type(exc).__name__} at step {i}: {exc}"
            break
        except IntervalOverflow as exc:
            abort = f"IntervalOverflow at step {i}: {exc}"
            break
        vec = Interval.stack(nxt)
        if float(np.max(vec.rad)) > blowup_cap:
            abort = f"blow-up cap {blowup_cap} exceeded at step {i + 1}"
            break
        actions.append(a)
        rewards.append(r)
        states.append(vec)
        s = nxt
        if config.system == CARTPOLE and config.x_escape is not None and not escaped:
            if float(vec[0].mig) > config.x_escape:
                escaped = True
                escape_step = i + 1
    empty = Interval._new(np.zeros(0), np.zeros(0))
    cert = PersistentCertificate(
        config=config,
        controller=controller,
        ic=ic_mid,
        requested_steps=n,
        states=Interval.stack(states),
        actions=Interval.stack(actions) if actions else empty,
        rewards=Interval.stack(rewards) if rewards else empty,
        abort_reason=abort,
        blowup_cap=blowup_cap,
        persistence_eps=DEFAULT_EPS[config.system] if eps is None else eps,
        escaped=escaped,
        escape_step=escape_step,
        guards=guards,
    )
    try:
        res = persistence_check(cert, cert.persistence_eps)
        cert.T_p, cert.T_p_lower_bound = res.T_p, res.lower_bound
    except Indeterminate:
        cert.T_p, cert.T_p_lower_bound = None, False
    return cert


def _distance_parts(config: MdpConfig, state: Interval) -> list:
    """Absolute deviations from the goal whose max is the persistence seminorm."""
    if config.system == PENDULUM:
        theta, omega = state[0], state[1]
        return [theta.cos().arccos(), abs(omega)]
    xd, theta, td = state[1], state[2], state[3]
    return [theta.cos().arccos(), abs(xd), abs(td)]


def persistence_flags(config: MdpConfig, states: Interval, eps: float) -> list:
    """True when provably outside the eps-box, False when provably inside, else None."""
    flags = []
    for i in range(len(states)):
        parts = _distance_parts(config, states[i])
        if any(float(p.lo) > eps for p in parts):
            flags.append(True)
        elif all(float(p.hi) <= eps for p in parts):
            flags.append(False)
        else:
            flags.append(None)
    return flags


def persistence_check(cert: PersistentCertificate, eps: Optional[float] = None) -> PersistenceResult:
    """Decide persistence step by step and compute the exit time ``T_p``.

    ``T_p`` is the time of the first state provably inside the eps-box. If no
    state enters it, ``T_p = steps * h``, flagged as a lower bound when the
    rollout was truncated. An undecidable state before the first entry raises
    :class:`Indeterminate`.
    """
    eps = cert.persistence_eps if eps is None else eps
    if math.isnan(eps):
        eps = DEFAULT_EPS[cert.config.system]
    flags = persistence_flags(cert.config, cert.states, eps)
    h = cert.config.h
    for i, f in enumerate(flags):
        if f is None:
            raise Indeterminate(f"state {i} straddles the eps={eps} boundary")
        if f is False:
            return PersistenceResult(flags, i * h, i, False)
    return PersistenceResult(flags, cert.steps * h, None, cert.horizon_truncated)


def accumulated_penalty_bounds(cert: PersistentCertificate, penalty) -> Interval:
    """Rigorous enclosure of the penalty sum over the certificate's steps.

    Raises :class:`HorizonTruncated` (with the partial enclosure attached) when
    the rollout did not reach the requested horizon.
    """
    cfg = cert.config
    n = cert.steps
    if n == 0:
        total = Interval(0.0)
    else:
        comps = tuple(cert.states[:n, k] for k in range(cfg.state_dim))
        per = as_interval(penalty(cfg, comps, cert.actions)).broadcast_to((n,))
        total = interval_sum(per)
    if cert.horizon_truncated:
        raise HorizonTruncated(
            f"enclosure only covers {n} of {cert.requested_steps} steps ({cert.abort_reason})",
            partial=total, steps=n, requested=cert.requested_steps,
        )
    return total


def float_exit_time(config: MdpConfig, states: np.ndarray, eps: Optional[float] = None) -> float:
    """T_p of a float trajectory: first time within eps of the goal, else ``steps * h``."""
    eps = DEFAULT_EPS[config.system] if eps is None else eps
    S = np.asarray(states, dtype=float)
    if config.system == PENDULUM:
        parts = [np.arccos(np.clip(np.cos(S[:, 0]), -1.0, 1.0)), np.abs(S[:, 1])]
    else:
        parts = [np.arccos(np.clip(np.cos(S[:, 2]), -1.0, 1.0)), np.abs(S[:, 1]), np.abs(S[:, 3])]
    inside = np.flatnonzero(np.max(parts, axis=0) <= eps)
    return float(inside[0] * config.h) if inside.size else (len(S) - 1) * config.h


def orbit_is_persistent(cert, eps: Optional[float] = None) -> bool:
    """Whether every point of a proven orbit ball is provably outside the eps-box.

    By periodicity this covers the whole infinite trajectory.
    """
    eps = DEFAULT_EPS[cert.config.system] if eps is None else eps
    try:
        flags = persistence_flags(cert.config, cert.state_enclosure(), eps)
    except GuardError:
        return False
    return all(f is True for f in flags)
