"""Black-box search for persistent solutions and controller fine-tuning.

Contains a self-contained (mu/mu_w, lambda)-CMA-ES with restarts, the penalty
functions used to score trajectories, the random-rollout threshold estimate and
a recurrence scan that turns a long trajectory into periodic-orbit candidates.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import dynamics, generic
from .dynamics import CARTPOLE, PENDULUM, MdpConfig
from .errors import ConfigError
from .prover import OrbitCandidate

PENALTY_KINDS = ("pendulum_neg_reward", "cartpole_shaped", "constant")


@dataclass(frozen=True)
class PenaltySpec:
    """Per-step penalty ``p(s, a)``; its episode sum is compared with ``threshold_M``."""

    kind: str = "pendulum_neg_reward"
    threshold_M: float = 0.0
    value: float = 1.0  # only used by the constant kind

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")

    @classmethod
    def for_system(cls, system: str, threshold_M: float = 0.0) -> "PenaltySpec":
        kind = "pendulum_neg_reward" if system == PENDULUM else "cartpole_shaped"
        return cls(kind=kind, threshold_M=threshold_M)

    def __call__(self, config: MdpConfig, state, action):
        if self.kind == "pendulum_neg_reward":
            # environment reward: the applied (clipped) action enters the a^2 term
            env = config if config.reward_action == "clipped" else config.with_(reward_action="clipped")
            return -dynamics.reward(env, state, action)
        if self.kind == "cartpole_shaped":
            return dynamics.cartpole_shaped_penalty(state)
        like = state[0]
        return like * 0.0 + self.value


def accumulated_penalty(config: MdpConfig, controller, penalty: PenaltySpec, ics, n_steps: int,
                        terminations: Optional[bool] = False) -> np.ndarray:
    """Vectorized penalty sums over float rollouts from each row of ``ics``."""
    return dynamics.batch_accumulate(config, controller, np.atleast_2d(ics), n_steps, penalty, terminations)


def estimate_threshold(config: MdpConfig, controller, penalty: PenaltySpec, n_random: int,
                       seed: int = 0, n_steps: Optional[int] = None) -> float:
    """Largest accumulated penalty over ``n_random`` rollouts from the initial distribution."""
    if n_random < 1:
        raise ValueError("n_random must be >= 1")
    rng = np.random.default_rng(seed)
    ics = dynamics.sample_initial_states(config, n_random, rng)
    n = config.episode_len if n_steps is None else n_steps
    return float(np.max(accumulated_penalty(config, controller, penalty, ics, n, config.terminations)))


# CMA-ES ------------------------------------------------------------------------------

@dataclass
class SearchConfig:
    """CMA-ES settings. ``box_low``/``box_high`` bound the search variables."""

    box_low: tuple
    box_high: tuple
    restarts: int = 50
    popsize: Optional[int] = None
    sigma0: float = 0.3  # fraction of the box width
    max_generations: int = 200
    episode_len: int = 1000
    terminations_disabled: bool = True
    tol_x: float = 1e-12
    tol_fun: float = 1e-12
    repair_weight: float = 1e4
    seed: int = 0

    def __post_init__(self):
        self.box_low = tuple(float(v) for v in self.box_low)
        self.box_high = tuple(float(v) for v in self.box_high)
        if len(self.box_low) != len(self.box_high) or not self.box_low:
            raise ConfigError("search box bounds differ in length")
        if any(not lo < hi for lo, hi in zip(self.box_low, self.box_high)):
            raise ConfigError("search box needs lo < hi in every dimension")
        if self.popsize is not None and self.popsize < 4:
            raise ConfigError("population size must be >= 4")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.box_low)

    @property
    def lam(self) -> int:
        return self.popsize or 4 + int(3 * math.log(self.dim))

    @classmethod
    def for_system(cls, system: str, **kw) -> "SearchConfig":
        if system == PENDULUM:
            kw.setdefault("box_low", (-2 * math.pi, -8.0))
            kw.setdefault("box_high", (2 * math.pi, 8.0))
            kw.setdefault("episode_len", 1000)
        else:
            kw.setdefault("box_low", (-0.5, -0.5, math.pi - 0.5, -0.5))
            kw.setdefault("box_high", (0.5, 0.5, math.pi + 0.5, 0.5))
            kw.setdefault("episode_len", 2000)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    """A search result: initial state and its accumulated penalty."""

    ic: tuple
    accumulated_penalty: float
    restart: int = 0
    generations: int = 0

    def to_dict(self) -> dict:
        return {
            "ic": [repr(float(v)) for v in self.ic],
            "accumulated_penalty": repr(float(self.accumulated_penalty)),
            "restart": self.restart,
            "generations": self.generations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(tuple(float(v) for v in d["ic"]), float(d["accumulated_penalty"]),
                   int(d.get("restart", 0)), int(d.get("generations", 0)))


class _CMAState:
    """One CMA-ES run in normalized coordinates (the box mapped to the unit cube)."""

    def __init__(self, n: int, lam: int, mean: np.ndarray, sigma: float, rng: np.random.Generator):
        self.n = n
        self.lam = lam
        self.rng = rng
        self.mean = np.array(mean, dtype=float)
        self.sigma = float(sigma)
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.gen = 0
        self.best_x: Optional[np.ndarray] = None
        self.best_f = -math.inf
        self.history: list = []
        self.done = False

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def tell(self, xs: np.ndarray, fs: np.ndarray):
        order = np.argsort(-fs, kind="stable")
        xs_sorted = xs[order[: self.mu]]
        old = self.mean
        self.mean = self.weights @ xs_sorted
        y = (self.mean - old) / self.sigma
        inv_sqrt = self.B @ np.diag(1 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * inv_sqrt @ y
        hsig = (np.linalg.norm(self.ps) / math.sqrt(1 - (1 - self.cs) ** (2 * (self.gen + 1))) / self.chi_n
                < 1.4 + 2 / (self.n + 1))
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y
        artmp = (xs_sorted - old) / self.sigma
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * (artmp.T * self.weights) @ artmp)
        self.sigma *= math.exp((self.cs / self.damps) * (np.linalg.norm(self.ps) / self.chi_n - 1))
        self.C = (self.C + self.C.T) / 2
        d2, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(d2, 1e-300))
        self.gen += 1
        self.history.append(float(fs[order[0]]))


def cmaes_maximize(objective: Callable[[np.ndarray], np.ndarray], config: SearchConfig,
                   x0: Optional[Sequence[float]] = None) -> List[Candidate]:
    """Maximize a batched objective over the search box with restarted CMA-ES.

    ``objective`` maps an array of shape ``(batch, dim)`` to ``(batch,)`` values.
    All restarts advance in lockstep so each generation is one batched call.
    Points outside the box are projected onto it and charged a quadratic
    penalty on the projection distance. Returns one candidate per restart,
    sorted by decreasing objective (ties broken by restart index).
    """
    lo = np.array(config.box_low)
    hi = np.array(config.box_high)
    width = hi - lo
    n, lam = config.dim, config.lam
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    runs = []
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        if x0 is not None:
            start = (np.asarray(x0, dtype=float) - lo) / width
        else:
            start = rng.random(n)
        runs.append(_CMAState(n, lam, start, config.sigma0, rng))

    for _ in range(config.max_generations):
        active = [r for r in runs if not r.done]
        if not active:
            break
        zs = [r.ask() for r in active]
        Z = np.concatenate(zs)
        Zc = np.clip(Z, 0.0, 1.0)
        X = lo + Zc * width
        with np.errstate(all="ignore"):
            raw = np.asarray(objective(X), dtype=float)
        raw = np.where(np.isfinite(raw), raw, -math.inf)
        fit = raw - config.repair_weight * np.sum((Z - Zc) ** 2, axis=1)
        for idx, r in enumerate(active):
            sl = slice(idx * lam, (idx + 1) * lam)
            f_r, z_r, zc_r, raw_r = fit[sl], Z[sl], Zc[sl], raw[sl]
            finite = np.isfinite(f_r)
            if not finite.any():
                r.done = True
                continue
            f_tell = np.where(finite, f_r, np.min(f_r[finite]) - 1.0)
            b = int(np.argmax(raw_r))
            if raw_r[b] > r.best_f:
                r.best_f = float(raw_r[b])
                r.best_x = zc_r[b].copy()
            r.tell(z_r, f_tell)
            spread = r.sigma * float(np.max(r.D))
            recent = r.history[-10:]
            if spread < config.tol_x:
                r.done = True
            elif len(recent) == 10 and max(recent) - min(recent) <= config.tol_fun * (1 + abs(recent[-1])):
                r.done = True

    cands = []
    for k, r in enumerate(runs):
        if r.best_x is None:
            continue
        ic = tuple(float(v) for v in lo + r.best_x * width)
        cands.append(Candidate(ic, r.best_f, k, r.gen))
    cands.sort(key=lambda c: (-c.accumulated_penalty, c.restart))
    return cands


def search_persistent(config: MdpConfig, controller, penalty: PenaltySpec,
                      search: SearchConfig) -> List[Candidate]:
    """Search initial states maximizing the accumulated penalty of an N-step rollout."""
    term = not search.terminations_disabled and config.terminations

    def objective(X):
        return accumulated_penalty(config, controller, penalty, X, search.episode_len, term)

    return cmaes_maximize(objective, search)


def recompute_penalty(config: MdpConfig, controller, penalty: PenaltySpec, cand: Candidate,
                      search: SearchConfig) -> float:
    term = not search.terminations_disabled and config.terminations
    return float(accumulated_penalty(config, controller, penalty, np.array([cand.ic]), search.episode_len, term)[0])


# periodic candidates ---------------------------------------------------------------------

@dataclass
class Recurrence:
    lag: int
    j: int
    start: int
    gap: float


def recurrences(states: np.ndarray, angle: int, tol: float = 0.05, min_lag: int = 2,
                max_lag: Optional[int] = None, j_max: int = 3, local_minima: bool = False) -> List[Recurrence]:
    """Lags at which the trajectory nearly repeats up to whole turns of the angle.

    For every lag the best start index is found; lags whose gap is below
    ``tol`` are returned sorted by (gap, lag). With ``local_minima`` only lags
    that are local minima of the gap over the lag are kept.
    """
    S = np.asarray(states, dtype=float)
    L = len(S)
    if L < 3:
        return []
    max_lag = L - 1 if max_lag is None else min(max_lag, L - 1)
    rows = []
    two_pi = 2.0 * math.pi
    for lag in range(min_lag, max_lag + 1):
        d = S[lag:] - S[:-lag]
        j = np.clip(np.rint(d[:, angle] / two_pi), -j_max, j_max)
        d[:, angle] -= two_pi * j
        gaps = np.max(np.abs(d), axis=1)
        i = int(np.argmin(gaps))
        rows.append(Recurrence(lag, int(j[i]), i, float(gaps[i])))
    out = []
    for k, r in enumerate(rows):
        if not r.gap <= tol:
            continue
        if not local_minima:
            out.append(r)
            continue
        left = rows[k - 1].gap if k > 0 else math.inf
        right = rows[k + 1].gap if k + 1 < len(rows) else math.inf
        if r.gap <= left and r.gap <= right:
            out.append(r)
    out.sort(key=lambda r: (r.gap, r.lag))
    return out


def periodic_candidates(traj_states: np.ndarray, config: MdpConfig, controller, tol: float = 0.05,
                        limit: int = 10, min_period: float = 0.5, **kw) -> List[OrbitCandidate]:
    """Orbit candidates for the best recurrences of a trajectory.

    Lags shorter than ``min_period`` seconds are skipped: at small step sizes
    consecutive states are close and would crowd out genuine periods.
    """
    kw.setdefault("min_lag", max(2, int(math.ceil(min_period / config.h - 1e-9))))
    out = []
    for r in recurrences(traj_states, config.angle_index, tol, **kw)[:limit]:
        states = np.asarray(traj_states)[r.start: r.start + r.lag]
        out.append(OrbitCandidate(config, controller, r.lag, r.j, states, gap=r.gap, start_index=r.start))
    return out


def detect_periodic_candidate(traj_states: np.ndarray, config: MdpConfig, controller,
                              tol: float = 0.05, **kw) -> Optional[OrbitCandidate]:
    """The single best recurrence as an orbit candidate, or ``None``."""
    cands = periodic_candidates(traj_states, config, controller, tol, limit=1, **kw)
    return cands[0] if cands else None


def recurrence_gap(states: np.ndarray, lag: int, start: int, j: int, angle: int) -> float:
    S = np.asarray(states, dtype=float)
    d = S[start + lag] - S[start]
    d[angle] -= 2.0 * math.pi * j
    return float(np.max(np.abs(d)))


# fine-tuning ---------------------------------------------------------------------------

def mean_return(config: MdpConfig, controller, ics: np.ndarray, n_steps: Optional[int] = None) -> float:
    with np.errstate(all="ignore"):
        r = dynamics.batch_returns(config, controller, ics, n_steps)
    return float(np.mean(r)) if np.all(np.isfinite(r)) else -math.inf


def fine_tune(spec, config: MdpConfig, n_episodes: int = 100, seed: int = 0, generations: int = 30,
              sigma0: float = 0.1, scale: float = 10.0, n_steps: Optional[int] = None):
    """Tune the numeric constants of an expression controller for mean return.

    CMA-ES runs over the constant vector inside ``c +- scale * max(|c|, 1)``.
    The episodes' initial states are drawn once from ``seed`` and shared by
    every evaluation. The original spec is returned unchanged when tuning does
    not improve the mean return, so the result is never worse on these seeds.
    Raises ``ValueError`` for a controller without constants.
    """
    consts = np.array(getattr(spec, "constants", []), dtype=float)
    if consts.size == 0:
        raise ValueError("controller has no tunable constants")
    rng = np.random.default_rng(seed)
    ics = dynamics.sample_initial_states(config, n_episodes, rng)
    spans = scale * np.maximum(np.abs(consts), 1.0)
    sc = SearchConfig(box_low=tuple(consts - spans), box_high=tuple(consts + spans), restarts=1,
                      sigma0=sigma0 / (2 * scale), max_generations=generations, seed=seed)

    def objective(C):
        return np.array([mean_return(config, spec.with_constants(c), ics, n_steps) for c in C])

    base = mean_return(config, spec, ics, n_steps)
    best = cmaes_maximize(objective, sc, x0=consts)
    if best and best[0].accumulated_penalty > base:
        return spec.with_constants(best[0].ic)
    return spec
