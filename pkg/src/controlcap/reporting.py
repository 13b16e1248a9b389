"""Higher-level workflows: return metrics, the search-prove-certify pipeline and run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, dynamics
from .certify import PersistentCertificate, rigorous_rollout
from .dynamics import CARTPOLE, EXPLICIT, SEMI_IMPLICIT, MdpConfig
from .errors import ControlCapError, GuardError
from .prover import OrbitCandidate, ProofCertificate, ProofFailed, prove_orbit
from .search import (
    Candidate,
    PenaltySpec,
    SearchConfig,
    estimate_threshold,
    periodic_candidates,
    search_persistent,
)

MANIFEST_NAME = "manifest.json"


def sha256_of(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class BundleWriter:
    """Writes outputs under one directory and a manifest that lists their digests.

    JSON outputs carry a ``"manifest"`` key and CSV outputs a leading comment
    line, both naming the manifest (relative to the bundle root).
    """

    def __init__(self, out_dir, command: str, config: dict, seed: int):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command=command, config=config, seed=seed)
        self._t0 = time.perf_counter()

    def add_input(self, path):
        p = Path(path)
        if p.exists():
            self.manifest.inputs[str(p)] = sha256_of(p)

    def _record(self, rel: str):
        self.manifest.outputs[rel] = sha256_of(self.root / rel)

    def write_json(self, rel: str, obj) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(obj, dict):
            obj = {"manifest": MANIFEST_NAME, **obj}
        path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
        self._record(rel)
        return path

    def write_csv(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"# manifest: {MANIFEST_NAME}\n" + text)
        self._record(rel)
        return path

    def finish(self) -> RunManifest:
        self.manifest.wall_time = time.perf_counter() - self._t0
        (self.root / MANIFEST_NAME).write_text(json.dumps(self.manifest.to_dict(), indent=2) + "\n")
        return self.manifest


def read_csv_table(path) -> list:
    """Parse a CSV written by :class:`BundleWriter`, skipping the manifest comment."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# simulation and return metrics --------------------------------------------------------

def cmd_simulate(config: MdpConfig, controller, ic: Sequence[float], n_steps: Optional[int] = None):
    return dynamics.rollout(config, controller, ic, n_steps)


@dataclass
class ReturnCell:
    scheme: str
    h: float
    episode_len: int
    mean: float
    std: float
    penalty_mean: Optional[float] = None
    penalty_std: Optional[float] = None


@dataclass
class ReturnsTable:
    cells: List[ReturnCell]
    discrepancies: dict  # h -> (mean, std) of |R_E - R_SI| per initial state
    n_episodes: int
    seed: int

    def cell(self, scheme: str, h: float) -> ReturnCell:
        for c in self.cells:
            if c.scheme == scheme and math.isclose(c.h, h):
                return c
        raise KeyError((scheme, h))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "scheme", "h", "episode_len", "mean", "std"])
        for c in self.cells:
            w.writerow(["return", c.scheme, repr(c.h), c.episode_len, repr(c.mean), repr(c.std)])
            if c.penalty_mean is not None:
                w.writerow(["shaped_penalty", c.scheme, repr(c.h), c.episode_len,
                            repr(c.penalty_mean), repr(c.penalty_std)])
        for h, (m, s) in self.discrepancies.items():
            w.writerow(["discrepancy_E_SI", "E/SI", repr(h), "", repr(m), repr(s)])
        return buf.getvalue()


def paired_discrepancy(returns_a, returns_b) -> tuple:
    """Mean and std of per-initial-state absolute return differences."""
    d = np.abs(np.asarray(returns_a, dtype=float) - np.asarray(returns_b, dtype=float))
    return float(np.mean(d)), float(np.std(d))


def cmd_eval_returns(config: MdpConfig, controller, n_episodes: int = 100, seed: int = 0,
                     step_sizes: Optional[Sequence[float]] = None) -> ReturnsTable:
    """Mean/std returns over the grid {E, SI} x {h, h/2} with shared initial states.

    Episode length is scaled so every cell covers the same physical time as
    ``config.episode_len`` steps at ``config.h``. The E/SI discrepancy is the
    mean and std of the per-initial-state absolute return difference.
    """
    rng = np.random.default_rng(seed)
    ics = dynamics.sample_initial_states(config, n_episodes, rng)
    horizon = config.episode_len * config.h
    hs = list(step_sizes) if step_sizes else [config.h, config.h / 2]
    cells = []
    per_ic = {}
    for h in hs:
        n = max(1, int(round(horizon / h)))
        for scheme in (SEMI_IMPLICIT, EXPLICIT):
            cfg = config.with_(scheme=scheme, h=h, episode_len=n)
            with np.errstate(all="ignore"):
                r = dynamics.batch_returns(cfg, controller, ics, n)
            cell = ReturnCell(scheme, h, n, float(np.mean(r)), float(np.std(r)))
            if config.system == CARTPOLE:
                pen = dynamics.batch_accumulate(cfg, controller, ics, n,
                                                lambda c, s, a: dynamics.cartpole_shaped_penalty(s))
                cell.penalty_mean, cell.penalty_std = float(np.mean(pen)), float(np.std(pen))
            cells.append(cell)
            per_ic[(scheme, h)] = r
    disc = {}
    for h in hs:
        disc[h] = paired_discrepancy(per_ic[(EXPLICIT, h)], per_ic[(SEMI_IMPLICIT, h)])
    return ReturnsTable(cells, disc, n_episodes, seed)


# pipeline ------------------------------------------------------------------------------------

@dataclass
class CandidateReport:
    candidate: Candidate
    orbit_candidates: int = 0
    orbits: List[ProofCertificate] = field(default_factory=list)
    proof_failures: list = field(default_factory=list)
    persistent: Optional[PersistentCertificate] = None
    persistent_error: Optional[str] = None

    @property
    def orbit(self) -> Optional[ProofCertificate]:
        return self.orbits[0] if self.orbits else None

    @property
    def proof_failed(self) -> bool:
        return self.orbit_candidates > 0 and not self.orbits


@dataclass
class PipelineResult:
    threshold_M: float
    candidates: List[Candidate]
    reports: List[CandidateReport]

    @property
    def certificates(self) -> List[ProofCertificate]:
        return [o for r in self.reports for o in r.orbits]

    @property
    def proof_failures_present(self) -> bool:
        return any(r.proof_failed for r in self.reports)


def _distinct(cands: List[Candidate], tol: float = 1e-6) -> List[Candidate]:
    out = []
    for c in cands:
        if all(np.max(np.abs(np.subtract(c.ic, o.ic))) > tol for o in out):
            out.append(c)
    return out


def _examine(config: MdpConfig, controller, cand: Candidate, search: SearchConfig, term: bool,
             max_orbit_candidates: int, recurrence_tol: float, r_star: float, variable_h,
             blowup_cap: float, guards: bool) -> CandidateReport:
    rep = CandidateReport(cand)
    n = search.episode_len
    traj = dynamics.rollout(config, controller, cand.ic, n, terminations=term)
    ocs = periodic_candidates(traj.states, config, controller, recurrence_tol, limit=max_orbit_candidates)
    rep.orbit_candidates = len(ocs)
    for oc in ocs:
        try:
            cert = prove_orbit(oc, r_star=r_star, variable_h=variable_h)
            if not any(same_orbit(cert, o) for o in rep.orbits):
                rep.orbits.append(cert)
        except ProofFailed as exc:
            rep.proof_failures.append({"m": oc.m, "j": oc.j, "gap": oc.gap, "attempts": exc.attempts})
        except ControlCapError as exc:
            rep.proof_failures.append({"m": oc.m, "j": oc.j, "gap": oc.gap,
                                       "error": type(exc).__name__, "detail": str(exc)})
    try:
        rep.persistent = rigorous_rollout(config.with_(episode_len=n), controller, cand.ic, n,
                                          blowup_cap=blowup_cap, guards=guards)
    except ControlCapError as exc:
        rep.persistent_error = f"{type(exc).__name__}: {exc}"
    return rep


def cmd_pipeline(config: MdpConfig, controller, search: SearchConfig, penalty: Optional[PenaltySpec] = None,
                 n_random: int = 100, top_k: int = 5, max_orbit_candidates: int = 30, r_star: float = 1e-4,
                 recurrence_tol: float = 0.05, variable_h=None, blowup_cap: float = 0.1, guards: bool = True,
                 threads: int = 1, out_dir=None, command: str = "pipeline") -> PipelineResult:
    """Search for persistent solutions, try to prove nearby orbits, certify each solution.

    Candidates whose penalty does not exceed the random-rollout threshold are
    dropped. For each remaining candidate (at most ``top_k`` distinct ones) the
    trajectory's recurrences are handed to the prover in order of gap until one
    is proven; whatever happens, a rigorous rollout certificate is produced.
    """
    penalty = penalty or PenaltySpec.for_system(config.system)
    term = (not search.terminations_disabled) and config.terminations
    search_cfg = config.with_(episode_len=search.episode_len, terminations=term)
    M = estimate_threshold(search_cfg, controller, penalty, n_random, seed=search.seed)
    penalty = PenaltySpec(penalty.kind, M, penalty.value)
    cands = search_persistent(config, controller, penalty, search)
    chosen = [c for c in _distinct(cands) if c.accumulated_penalty > M][:top_k]

    def work(c):
        return _examine(config, controller, c, search, term, max_orbit_candidates, recurrence_tol,
                        r_star, variable_h, blowup_cap, guards)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            reports = list(ex.map(work, chosen))
    else:
        reports = [work(c) for c in chosen]
    result = PipelineResult(M, cands, reports)
    if out_dir is not None:
        write_bundle(result, out_dir, config, controller, search, penalty, command)
    return result


def write_bundle(result: PipelineResult, out_dir, config: MdpConfig, controller, search: SearchConfig,
                 penalty: PenaltySpec, command: str) -> RunManifest:
    snapshot = {"mdp": config.to_dict(), "controller": controller.to_dict(), "search": search.to_dict(),
                "penalty": asdict(penalty)}
    bw = BundleWriter(out_dir, command, snapshot, search.seed)
    bw.write_json("threshold.json", {"threshold_M": repr(result.threshold_M), "penalty": penalty.kind})
    bw.write_json("candidates.json", {"candidates": [c.to_dict() for c in result.candidates]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "ic", "accumulated_penalty", "orbit_candidates", "orbit_proven", "m", "j",
                "map", "r", "max_step_reward_lo", "max_step_reward_hi", "steps_certified", "return_lo",
                "return_hi", "T_p", "T_p_lower_bound", "abort_reason"])
    for k, rep in enumerate(result.reports):
        row = [k, " ".join(repr(v) for v in rep.candidate.ic), repr(rep.candidate.accumulated_penalty),
               rep.orbit_candidates, rep.orbit is not None]
        for q, o in enumerate(rep.orbits):
            bw.write_json(f"orbits/certificate_{k:02d}_{q:02d}.json", o.to_dict())
        if rep.orbit is not None:
            o = rep.orbit
            row += [o.m, o.j, o.map_kind, repr(o.r), repr(float(o.max_step_reward.lo)),
                    repr(float(o.max_step_reward.hi))]
        else:
            row += ["", "", "", "", "", ""]
        if rep.proof_failures:
            bw.write_json(f"orbits/failures_{k:02d}.json", {"failures": _jsonable(rep.proof_failures)})
        if rep.persistent is not None:
            pc = rep.persistent
            bw.write_json(f"persistent/certificate_{k:02d}.json", pc.to_dict())
            bw.write_csv(f"persistent/enclosures_{k:02d}.csv", pc.to_csv())
            ret = pc.return_enclosure
            row += [pc.steps, repr(float(ret.lo)), repr(float(ret.hi)),
                    "" if pc.T_p is None else repr(pc.T_p), pc.T_p_lower_bound, pc.abort_reason or ""]
        else:
            row += ["", "", "", "", "", rep.persistent_error or ""]
        w.writerow(row)
    bw.write_csv("summary.csv", buf.getvalue())
    return bw.finish()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return repr(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def same_orbit(a: ProofCertificate, b: ProofCertificate, tol: float = 1e-6) -> bool:
    """Whether two certificates describe the same orbit (any phase, angles mod 2*pi)."""
    if a.m != b.m or a.j != b.j or a.config.h != b.config.h:
        return False
    return orbit_distance_to(a, b.states[0]) <= tol


def orbit_distance_to(cert: ProofCertificate, point: Sequence[float]) -> float:
    """Sup-norm distance from ``point`` to the nearest orbit point, angles taken mod 2*pi."""
    S = cert.states
    a = cert.config.angle_index
    d = S - np.asarray(point, dtype=float)
    d[:, a] = (d[:, a] + math.pi) % (2 * math.pi) - math.pi
    return float(np.min(np.max(np.abs(d), axis=1)))


def summarize_bundle(bundle_dir) -> dict:
    """Collect orbit and persistent-certificate rows from a pipeline bundle."""
    root = Path(bundle_dir)
    rows = read_csv_table(root / "summary.csv")
    thr = json.loads((root / "threshold.json").read_text())
    return {"threshold_M": float(thr["threshold_M"]), "rows": rows}
