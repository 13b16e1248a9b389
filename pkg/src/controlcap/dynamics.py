"""Pendulum and cartpole swing-up dynamics with explicit and semi-implicit Euler.

Everything here is generic over the scalar kind: a state component may be a
float, a numpy array (a batch of independent rollouts), an :class:`Interval`
or a :class:`Jet`. Physical constants are the binary64 values stored in the
config and every operation involving a state-dependent quantity is carried out
in the state's kind, so interval evaluation encloses the real-arithmetic map.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import generic
from .errors import ConfigError

PENDULUM = "pendulum"
CARTPOLE = "cartpole"
EXPLICIT = "E"
SEMI_IMPLICIT = "SI"

_SCHEME_ALIASES = {
    "e": EXPLICIT,
    "explicit": EXPLICIT,
    "si": SEMI_IMPLICIT,
    "semi-implicit": SEMI_IMPLICIT,
    "semiimplicit": SEMI_IMPLICIT,
    "semi_implicit": SEMI_IMPLICIT,
}
_SYSTEM_ALIASES = {
    "pendulum": PENDULUM,
    "cartpole": CARTPOLE,
    "cartpoleswingup": CARTPOLE,
    "cartpole_swingup": CARTPOLE,
    "cartpole-swingup": CARTPOLE,
}


@dataclass(frozen=True)
class PendulumConstants:
    l: float = 1.0
    m: float = 1.0
    g: float = 10.0


@dataclass(frozen=True)
class CartpoleConstants:
    m_p: float = 0.5
    l: float = 0.6
    m_c: float = 0.5
    g: float = 9.82
    f: float = 0.1


@dataclass(frozen=True)
class MdpConfig:
    """Full parameterization of one discrete-time control problem.

    ``reward_action`` picks which action enters the pendulum's ``a**2`` reward
    term: ``"clipped"`` (what the environment applies) or ``"raw"`` (the
    controller output before clipping).
    """

    system: str = PENDULUM
    scheme: str = SEMI_IMPLICIT
    h: float = 0.05
    episode_len: int = 200
    constants: object = None
    action_clip: tuple = (-2.0, 2.0)
    velocity_clip: Optional[tuple] = (-8.0, 8.0)
    action_scale: float = 1.0
    x_escape: Optional[float] = None
    terminations: bool = False
    reward_action: str = "clipped"
    init_low: tuple = ()
    init_high: tuple = ()

    def __post_init__(self):
        system = _SYSTEM_ALIASES.get(str(self.system).lower())
        if system is None:
            raise ConfigError(f"unknown system {self.system!r}")
        scheme = _SCHEME_ALIASES.get(str(self.scheme).lower())
        if scheme is None:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "system", system)
        object.__setattr__(self, "scheme", scheme)
        if not (isinstance(self.h, (int, float)) and self.h > 0 and math.isfinite(self.h)):
            raise ConfigError("h must be a positive finite number")
        object.__setattr__(self, "h", float(self.h))
        if int(self.episode_len) < 1:
            raise ConfigError("episode_len must be >= 1")
        object.__setattr__(self, "episode_len", int(self.episode_len))
        if self.constants is None:
            const = PendulumConstants() if system == PENDULUM else CartpoleConstants()
            object.__setattr__(self, "constants", const)
        elif isinstance(self.constants, dict):
            cls = PendulumConstants if system == PENDULUM else CartpoleConstants
            object.__setattr__(self, "constants", cls(**self.constants))
        lo, hi = self.action_clip
        if not lo < hi:
            raise ConfigError("action_clip needs lo < hi")
        object.__setattr__(self, "action_clip", (float(lo), float(hi)))
        if self.velocity_clip is not None:
            lo, hi = self.velocity_clip
            if not lo < hi:
                raise ConfigError("velocity_clip needs lo < hi")
            object.__setattr__(self, "velocity_clip", (float(lo), float(hi)))
        if self.reward_action not in ("clipped", "raw"):
            raise ConfigError("reward_action must be 'clipped' or 'raw'")
        if len(self.init_low) != len(self.init_high):
            raise ConfigError("init_low and init_high differ in length")
        if self.init_low:
            if len(self.init_low) != self.state_dim:
                raise ConfigError("initial box has the wrong dimension")
            if any(a > b for a, b in zip(self.init_low, self.init_high)):
                raise ConfigError("initial box needs lo <= hi")
            object.__setattr__(self, "init_low", tuple(float(v) for v in self.init_low))
            object.__setattr__(self, "init_high", tuple(float(v) for v in self.init_high))

    # factories ------------------------------------------------------------
    @classmethod
    def pendulum(cls, scheme=SEMI_IMPLICIT, h=0.05, episode_len=200, **kw) -> "MdpConfig":
        kw.setdefault("init_low", (-math.pi, -1.0))
        kw.setdefault("init_high", (math.pi, 1.0))
        return cls(system=PENDULUM, scheme=scheme, h=h, episode_len=episode_len, **kw)

    @classmethod
    def cartpole(cls, scheme=SEMI_IMPLICIT, h=0.01, episode_len=500, **kw) -> "MdpConfig":
        kw.setdefault("action_clip", (-1.0, 1.0))
        kw.setdefault("velocity_clip", None)
        kw.setdefault("action_scale", 10.0)
        kw.setdefault("x_escape", 2.4)
        kw.setdefault("terminations", True)
        kw.setdefault("init_low", (0.0, 0.0, math.pi - 0.05, -0.05))
        kw.setdefault("init_high", (0.0, 0.0, math.pi + 0.05, 0.05))
        return cls(system=CARTPOLE, scheme=scheme, h=h, episode_len=episode_len, **kw)

    def with_(self, **changes) -> "MdpConfig":
        return replace(self, **changes)

    # structure --------------------------------------------------------------
    @property
    def state_dim(self) -> int:
        return 2 if self.system == PENDULUM else 4

    @property
    def angle_index(self) -> int:
        return 0 if self.system == PENDULUM else 2

    @property
    def state_names(self) -> tuple:
        if self.system == PENDULUM:
            return ("theta", "omega")
        return ("x", "x_dot", "theta", "theta_dot")

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["constants"] = asdict(self.constants)
        for k in ("action_clip", "velocity_clip", "init_low", "init_high"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MdpConfig":
        d = dict(d)
        system = _SYSTEM_ALIASES.get(str(d.get("system", PENDULUM)).lower())
        if system is None:
            raise ConfigError(f"unknown system {d.get('system')!r}")
        base = cls.pendulum if system == PENDULUM else cls.cartpole
        for k in ("action_clip", "velocity_clip", "init_low", "init_high"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        d.pop("system", None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return base(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "MdpConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


# vector fields -----------------------------------------------------------------

def pendulum_accel(theta, omega, u, constants: PendulumConstants = PendulumConstants()):
    """Angular acceleration 3u/(l^2 m) + 3 g sin(theta) / (2 l).

    ``omega`` does not enter the pendulum field; it is accepted for a uniform
    signature.
    """
    c = constants
    return u * 3.0 / (c.l * c.l * c.m) + generic.sin(theta) * 3.0 * c.g / (2.0 * c.l)


def cartpole_accels(theta, theta_dot, x_dot, u, constants: CartpoleConstants = CartpoleConstants()):
    """Return (theta_ddot, x_ddot) for an already scaled force ``u``.

    Each constant multiplies a kind-valued subexpression on its own so that no
    product of constants is formed in plain float arithmetic.
    """
    c = constants
    s = generic.sin(theta)
    co = generic.cos(theta)
    total = c.m_p + c.m_c  # exact at the defaults (0.5 + 0.5)
    mpl = c.m_p * c.l  # exact at the defaults (0.5 * l)
    td2 = generic.sqr(theta_dot)
    c2 = generic.sqr(co)
    force = u - x_dot * c.f
    num_t = td2 * s * co * mpl * -3.0 + s * total * c.g * 6.0 + force * co * 6.0
    den_t = c2 * mpl * -3.0 + total * c.l * 4.0
    num_x = td2 * s * mpl * -2.0 + s * co * c.m_p * c.g * 3.0 + force * 4.0
    den_x = c2 * c.m_p * -3.0 + total * 4.0
    return generic.divide(num_t, den_t), generic.divide(num_x, den_x)


# observations ---------------------------------------------------------------

PENDULUM_FEATURES = ("cos_theta", "sin_theta", "theta_dot")
CARTPOLE_FEATURES = ("x", "x_dot", "cos_theta", "sin_theta", "theta_dot")


def feature(config: MdpConfig, state: Sequence, name: str):
    if config.system == PENDULUM:
        theta, omega = state
        table = {"theta": lambda: theta, "theta_dot": lambda: omega, "omega": lambda: omega}
    else:
        x, xd, theta, td = state
        table = {
            "x": lambda: x,
            "x_dot": lambda: xd,
            "theta": lambda: theta,
            "theta_dot": lambda: td,
        }
    table["cos_theta"] = lambda: generic.cos(state[config.angle_index])
    table["sin_theta"] = lambda: generic.sin(state[config.angle_index])
    if name not in table:
        raise KeyError(f"unknown observation feature {name!r}")
    return table[name]()


def default_obs_map(system: str) -> tuple:
    return PENDULUM_FEATURES if system == PENDULUM else CARTPOLE_FEATURES


def observe(config: MdpConfig, state: Sequence, obs_map: Optional[Sequence[str]] = None) -> tuple:
    names = obs_map or default_obs_map(config.system)
    return tuple(feature(config, state, n) for n in names)


def controller_action(config: MdpConfig, state: Sequence, controller):
    """Raw controller output at ``state`` (``controller`` may be a spec or callable)."""
    if hasattr(controller, "act"):
        return controller.act(config, state)
    return controller(state)


# one step -------------------------------------------------------------------

def applied_action(config: MdpConfig, action, clip=generic.clip):
    lo, hi = config.action_clip
    return clip(action, lo, hi)


def step_with_action(config: MdpConfig, state: Sequence, action, h=None, clip=generic.clip) -> tuple:
    """Advance one step given the raw (pre-clip) action.

    ``h`` overrides ``config.h`` and may itself be of any scalar kind, which is
    how the variable-step orbit map differentiates with respect to the step.
    ``clip`` defaults to the guarded clip; pass ``generic.clamp`` when only an
    enclosure (not smoothness) is needed.
    """
    h = config.h if h is None else h
    a = applied_action(config, action, clip)
    if config.system == PENDULUM:
        theta, omega = state
        acc = pendulum_accel(theta, omega, a, config.constants)
        vclip = config.velocity_clip
        if config.scheme == EXPLICIT:
            theta1 = theta + omega * h
            omega1 = omega + acc * h
            if vclip is not None:
                omega1 = clip(omega1, *vclip)
        else:
            omega1 = omega + acc * h
            if vclip is not None:
                omega1 = clip(omega1, *vclip)
            theta1 = theta + omega1 * h
        return (theta1, omega1)
    x, xd, theta, td = state
    u = a * config.action_scale
    tdd, xdd = cartpole_accels(theta, td, xd, u, config.constants)
    if config.scheme == EXPLICIT:
        return (x + xd * h, xd + xdd * h, theta + td * h, td + tdd * h)
    xd1 = xd + xdd * h
    td1 = td + tdd * h
    return (x + xd1 * h, xd1, theta + td1 * h, td1)


def step(config: MdpConfig, state: Sequence, controller, h=None) -> tuple:
    """One transition of the closed-loop system."""
    return step_with_action(config, state, controller_action(config, state, controller), h)


# rewards and penalties ----------------------------------------------------------

def reward(config: MdpConfig, state: Sequence, action):
    """Per-step reward on the pre-step state.

    Pendulum: -wrap(theta)^2 - 0.1 omega^2 - 0.001 a^2. Cartpole: cos(theta).
    ``action`` is the raw controller output; ``config.reward_action`` decides
    whether it is clipped first.
    """
    if config.system == PENDULUM:
        theta, omega = state
        a = action
        if config.reward_action == "clipped":
            a = generic.clamp(action, *config.action_clip)
        wt = generic.wrapped_angle(theta)
        return -(generic.sqr(wt)) - generic.sqr(omega) * 0.1 - generic.sqr(a) * 0.001
    return generic.cos(state[2])


def cartpole_shaped_penalty(state: Sequence):
    """-cos(theta) + 0.5 theta_dot^2 + 0.5 x_dot^2 (large when swinging hard at the bottom)."""
    x, xd, theta, td = state
    return -generic.cos(theta) + generic.sqr(td) * 0.5 + generic.sqr(xd) * 0.5


def reward_bounds(config: MdpConfig) -> tuple:
    if config.system == PENDULUM:
        vmax = max(abs(v) for v in config.velocity_clip) if config.velocity_clip else math.inf
        amax = max(abs(v) for v in config.action_clip)
        return (-(math.pi ** 2 + 0.1 * vmax ** 2 + 0.001 * amax ** 2), 0.0)
    return (-1.0, 1.0)


def escaped(config: MdpConfig, state: Sequence):
    if config.system != CARTPOLE or config.x_escape is None:
        return False
    return np.abs(state[0]) > config.x_escape


# rollouts -----------------------------------------------------------------------

@dataclass
class Trajectory:
    """Float rollout record. ``states`` has one more row than ``actions``."""

    config: MdpConfig
    states: np.ndarray
    actions: np.ndarray
    applied: np.ndarray
    rewards: np.ndarray
    terminated_at: Optional[int] = None

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def steps(self) -> int:
        return len(self.rewards)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *self.config.state_names, "action", "applied_action", "reward"])
        h = self.config.h
        for i in range(len(self.states)):
            s = [repr(float(v)) for v in self.states[i]]
            if i < len(self.rewards):
                tail = [repr(float(self.actions[i])), repr(float(self.applied[i])), repr(float(self.rewards[i]))]
            else:
                tail = ["", "", ""]
            w.writerow([repr(i * h), *s, *tail])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "states": [[repr(float(v)) for v in row] for row in self.states],
            "actions": [repr(float(v)) for v in self.actions],
            "rewards": [repr(float(v)) for v in self.rewards],
            "return": repr(self.total_return),
            "terminated_at": self.terminated_at,
        }


def rollout(config: MdpConfig, controller, ic: Sequence[float], n_steps: Optional[int] = None,
            terminations: Optional[bool] = None) -> Trajectory:
    """Float rollout from ``ic`` recording rewards evaluated on pre-step states."""
    n = config.episode_len if n_steps is None else int(n_steps)
    if n < 1:
        raise ValueError("rollout needs at least one step")
    term = config.terminations if terminations is None else terminations
    p = config.state_dim
    if len(ic) != p:
        raise ValueError(f"initial state must have {p} components")
    states = np.empty((n + 1, p))
    actions = np.empty(n)
    applied = np.empty(n)
    rewards = np.empty(n)
    s = tuple(float(v) for v in ic)
    states[0] = s
    terminated = None
    for i in range(n):
        a = float(controller_action(config, s, controller))
        actions[i] = a
        applied[i] = generic.clip(a, *config.action_clip)
        rewards[i] = reward(config, s, a)
        s = tuple(float(v) for v in step_with_action(config, s, a))
        states[i + 1] = s
        if term and escaped(config, s):
            terminated = i + 1
            break
    k = i + 1
    return Trajectory(config, states[: k + 1], actions[:k], applied[:k], rewards[:k], terminated)


def batch_accumulate(config: MdpConfig, controller, ics: np.ndarray, n_steps: int,
                     per_step: Callable, terminations: Optional[bool] = None) -> np.ndarray:
    """Vectorized sum of ``per_step(config, state, action)`` over rollouts from each row of ``ics``.

    Rows stop accumulating after termination. Rollouts that blow up numerically
    get ``-inf`` reward contributions replaced by ``nan`` so callers can filter them.
    """
    ics = np.asarray(ics, dtype=float)
    if ics.ndim != 2 or ics.shape[1] != config.state_dim:
        raise ValueError("ics must have shape (batch, state_dim)")
    term = config.terminations if terminations is None else terminations
    s = tuple(ics[:, k].copy() for k in range(ics.shape[1]))
    total = np.zeros(len(ics))
    alive = np.ones(len(ics), dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(n_steps):
            a = controller_action(config, s, controller)
            a = np.broadcast_to(np.asarray(a, dtype=float), total.shape)
            total += np.where(alive, per_step(config, s, a), 0.0)
            s = step_with_action(config, s, a)
            if term:
                alive &= ~np.asarray(escaped(config, s))
                if not alive.any():
                    break
    return total


def batch_returns(config: MdpConfig, controller, ics: np.ndarray, n_steps: Optional[int] = None,
                  terminations: Optional[bool] = None) -> np.ndarray:
    n = config.episode_len if n_steps is None else n_steps
    return batch_accumulate(config, controller, ics, n, reward, terminations)


def sample_initial_states(config: MdpConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` initial states uniformly from the config's initial box."""
    if not config.init_low:
        raise ConfigError("config has no initial-state box")
    lo = np.array(config.init_low)
    hi = np.array(config.init_high)
    return lo + (hi - lo) * rng.random((n, len(lo)))
