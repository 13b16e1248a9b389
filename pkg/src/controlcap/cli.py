"""Command-line entry point.

Every command writes its outputs under ``--out`` together with a manifest.
Exit codes: 0 success, 2 configuration error, 3 proof failures present (the
bundle is still written).
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .certify import rigorous_rollout
from .controllers import resolve_controller
from .dynamics import MdpConfig
from .errors import ConfigError, ControlCapError, DimMismatch, ParseError, UnknownController
from .prover import OrbitCandidate, ProofFailed, prove_orbit
from .reporting import (
    BundleWriter,
    cmd_eval_returns,
    cmd_pipeline,
    cmd_simulate,
    same_orbit,
    summarize_bundle,
)
from .search import (
    Candidate,
    PenaltySpec,
    SearchConfig,
    estimate_threshold,
    fine_tune,
    periodic_candidates,
    search_persistent,
)
from . import dynamics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROOF_FAILURES = 3

_CONFIG_ERRORS = (ConfigError, UnknownController, ParseError, DimMismatch)


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path!r} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - {"mdp", "controller", "search", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def _mdp(ctx, system, scheme, h, episode_len, reward_action=None) -> MdpConfig:
    base = ctx.obj["file"].get("mdp")
    if base is not None:
        cfg = MdpConfig.from_dict(base)
        if system is not None and MdpConfig.from_dict({"system": system}).system != cfg.system:
            raise ConfigError("--system contradicts the config file")
    else:
        sysname = system or "pendulum"
        cfg = MdpConfig.from_dict({"system": sysname})
    changes = {}
    if scheme is not None:
        changes["scheme"] = scheme
    if h is not None:
        changes["h"] = h
    if episode_len is not None:
        changes["episode_len"] = episode_len
    if reward_action is not None:
        changes["reward_action"] = reward_action
    if changes:
        cfg = MdpConfig.from_dict({**cfg.to_dict(), **changes})
    return cfg


def _controller(ctx, name, cfg: MdpConfig):
    name = name or ctx.obj["file"].get("controller")
    if name is None:
        raise ConfigError("no controller given")
    spec = resolve_controller(name)
    if getattr(spec, "system", cfg.system) != cfg.system:
        raise ConfigError(f"controller {name!r} is for {spec.system}, not {cfg.system}")
    return spec


def _search(ctx, cfg: MdpConfig, **overrides) -> SearchConfig:
    kw = dict(ctx.obj["file"].get("search", {}))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    kw.setdefault("seed", ctx.obj["seed"])
    for k in ("box_low", "box_high"):
        if k in kw:
            kw[k] = tuple(float(v) for v in kw[k])
    try:
        return SearchConfig.for_system(cfg.system, **kw)
    except TypeError as exc:
        raise ConfigError(f"bad search settings: {exc}") from exc


def _parse_vector(text: str, dim: int):
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"cannot parse state {text!r}") from exc
    if len(vals) != dim:
        raise ConfigError(f"state needs {dim} components, got {len(vals)}")
    return vals


def _writer(ctx, command: str, snapshot: dict) -> BundleWriter:
    bw = BundleWriter(ctx.obj["out"], command, snapshot, ctx.obj["seed"])
    if ctx.obj["config_path"]:
        bw.add_input(ctx.obj["config_path"])
    return bw


_system_opt = click.option("--system", type=str, default=None, help="pendulum or cartpole")
_scheme_opt = click.option("--scheme", type=str, default=None, help="E (explicit) or SI (semi-implicit)")
_h_opt = click.option("--h", "h", type=float, default=None, help="step size in seconds")
_ctrl_opt = click.option("--controller", type=str, default=None, help="builtin name or JSON file")
_reward_opt = click.option("--reward-action", type=click.Choice(["clipped", "raw"]), default=None,
                           help="action entering the pendulum reward")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file with mdp/controller/search sections")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.version_option(__version__)
@click.pass_context
def cli(ctx, config_path, seed, out, threads):
    """Interval certificates for persistent and periodic solutions of control loops."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, out=out, threads=max(1, threads))
    ctx.obj["file"] = _load_config_file(config_path)
    if "seed" in ctx.obj["file"] and ctx.get_parameter_source("seed").name == "DEFAULT":
        ctx.obj["seed"] = int(ctx.obj["file"]["seed"])


@cli.command()
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@_reward_opt
@click.option("--ic", required=True, help="initial state, comma separated")
@click.option("--steps", type=int, default=None, help="defaults to the episode length")
@click.pass_context
def simulate(ctx, system, scheme, h, controller, reward_action, ic, steps):
    """Float rollout from one initial state; writes trajectory.csv."""
    cfg = _mdp(ctx, system, scheme, h, None, reward_action)
    spec = _controller(ctx, controller, cfg)
    traj = cmd_simulate(cfg, spec, _parse_vector(ic, cfg.state_dim), steps)
    bw = _writer(ctx, "simulate", {"mdp": cfg.to_dict(), "controller": spec.to_dict()})
    bw.write_csv("trajectory.csv", traj.to_csv())
    bw.finish()
    click.echo(f"return {traj.total_return!r} over {len(traj.rewards)} steps")


@cli.command("eval-returns")
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@_reward_opt
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--episode-len", type=int, default=None)
@click.pass_context
def eval_returns(ctx, system, scheme, h, controller, reward_action, episodes, episode_len):
    """Mean returns over {E, SI} x {h, h/2} and the paired E/SI discrepancy."""
    cfg = _mdp(ctx, system, scheme, h, episode_len, reward_action)
    spec = _controller(ctx, controller, cfg)
    table = cmd_eval_returns(cfg, spec, episodes, ctx.obj["seed"])
    bw = _writer(ctx, "eval-returns", {"mdp": cfg.to_dict(), "controller": spec.to_dict(),
                                       "episodes": episodes})
    bw.write_csv("returns.csv", table.to_csv())
    bw.finish()
    for c in table.cells:
        click.echo(f"{c.scheme:>2} h={c.h:<8g} N={c.episode_len:<5d} return {c.mean:.2f} +- {c.std:.2f}")
    for hh, (m, s) in table.discrepancies.items():
        click.echo(f"|E-SI| h={hh:g}: {m:.2f} +- {s:.2f}")


@cli.command()
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@click.option("--episodes", "episode_len", type=int, default=None, help="episode length N in steps")
@click.option("--restarts", type=int, default=None)
@click.option("--generations", "max_generations", type=int, default=None)
@click.option("--n-random", type=int, default=100, show_default=True)
@click.pass_context
def search(ctx, system, scheme, h, controller, episode_len, restarts, max_generations, n_random):
    """CMA-ES search for initial states with large accumulated penalty; writes candidates.json."""
    cfg = _mdp(ctx, system, scheme, h, None)
    spec = _controller(ctx, controller, cfg)
    sc = _search(ctx, cfg, episode_len=episode_len, restarts=restarts, max_generations=max_generations)
    pen = PenaltySpec.for_system(cfg.system)
    term = (not sc.terminations_disabled) and cfg.terminations
    M = estimate_threshold(cfg.with_(episode_len=sc.episode_len, terminations=term), spec, pen, n_random,
                           seed=sc.seed)
    cands = search_persistent(cfg, spec, pen, sc)
    bw = _writer(ctx, "search", {"mdp": cfg.to_dict(), "controller": spec.to_dict(), "search": sc.to_dict()})
    bw.write_json("candidates.json", {"threshold_M": repr(M), "penalty": pen.kind,
                                      "candidates": [c.to_dict() for c in cands]})
    bw.finish()
    above = sum(c.accumulated_penalty > M for c in cands)
    click.echo(f"threshold M = {M:.4f}; best penalty {cands[0].accumulated_penalty:.4f}; {above} above M")


def _orbit_candidates_from(data: dict, cfg: Optional[MdpConfig], spec, tol: float, limit: int):
    if "states" in data:
        return [OrbitCandidate.from_dict(data)]
    if "candidates" in data:
        if cfg is None or spec is None:
            raise ConfigError("a search result needs --controller and an mdp config to be proven")
        cand = Candidate.from_dict(data["candidates"][0])
        n = data.get("episode_len") or SearchConfig.for_system(cfg.system).episode_len
        traj = dynamics.rollout(cfg, spec, cand.ic, n, terminations=False)
        return periodic_candidates(traj.states, cfg, spec, tol, limit=limit)
    raise ConfigError("candidate file holds neither an orbit candidate nor search candidates")


@cli.command()
@click.option("--candidate", "candidate_path", required=True, type=click.Path(exists=True, dir_okay=False))
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@_reward_opt
@click.option("--r-star", type=float, default=1e-4, show_default=True)
@click.option("--variable-h/--fixed-h", default=None, help="force the variable- or fixed-step map")
@click.option("--limit", type=int, default=10, show_default=True, help="recurrences tried for search results")
@click.option("--tol", type=float, default=0.05, show_default=True, help="recurrence tolerance")
@click.pass_context
def prove(ctx, candidate_path, system, scheme, h, controller, reward_action, r_star, variable_h, limit, tol):
    """Prove periodic orbits from an orbit candidate (or the best search candidate)."""
    data = json.loads(Path(candidate_path).read_text())
    cfg = spec = None
    if "states" not in data:
        cfg = _mdp(ctx, system, scheme, h, None, reward_action)
        spec = _controller(ctx, controller, cfg)
    ocs = _orbit_candidates_from(data, cfg, spec, tol, limit)
    bw = _writer(ctx, "prove", {"candidate": str(candidate_path), "r_star": r_star, "variable_h": variable_h})
    bw.add_input(candidate_path)
    failures = []
    proven = []
    for k, oc in enumerate(ocs):
        try:
            cert = prove_orbit(oc, r_star=r_star, variable_h=variable_h)
            if any(same_orbit(cert, o) for o in proven):
                continue
        except ProofFailed as exc:
            failures.append({"m": oc.m, "j": oc.j, "attempts": exc.attempts})
            continue
        except ControlCapError as exc:
            failures.append({"m": oc.m, "j": oc.j, "error": type(exc).__name__, "detail": str(exc)})
            continue
        name = "certificate.json" if len(ocs) == 1 else f"certificate_{k:02d}.json"
        bw.write_json(name, cert.to_dict())
        proven.append(cert)
        click.echo(f"proved m={cert.m} j={cert.j} map={cert.map_kind} r={cert.r:.3e} "
                   f"max reward {cert.max_step_reward.to_json()}")
    if failures:
        bw.write_json("failures.json", {"failures": json.loads(json.dumps(failures, default=str))})
    bw.finish()
    if not ocs:
        click.echo("no periodic candidate found")
    if failures:
        click.echo(f"{len(failures)} proof failure(s)")
        raise _Exit(EXIT_PROOF_FAILURES)


@cli.command()
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@_reward_opt
@click.option("--ic", required=True, help="initial state, comma separated")
@click.option("--steps", type=int, default=None)
@click.option("--blowup-cap", type=float, default=0.1, show_default=True)
@click.option("--eps", type=float, default=None, help="persistence radius")
@click.option("--guards/--no-guards", default=True, show_default=True,
              help="abort on clips straddling a breakpoint")
@click.pass_context
def certify(ctx, system, scheme, h, controller, reward_action, ic, steps, blowup_cap, eps, guards):
    """Rigorous interval rollout; writes certificate.json and enclosures.csv."""
    cfg = _mdp(ctx, system, scheme, h, None, reward_action)
    spec = _controller(ctx, controller, cfg)
    cert = rigorous_rollout(cfg, spec, _parse_vector(ic, cfg.state_dim), steps, blowup_cap=blowup_cap,
                            eps=eps, guards=guards)
    bw = _writer(ctx, "certify", {"mdp": cfg.to_dict(), "controller": spec.to_dict()})
    bw.write_json("certificate.json", cert.to_dict())
    bw.write_csv("enclosures.csv", cert.to_csv())
    bw.finish()
    ret = cert.return_enclosure
    click.echo(f"{cert.steps}/{cert.requested_steps} steps, return in [{float(ret.lo)!r}, {float(ret.hi)!r}]")
    if cert.abort_reason:
        click.echo(f"stopped: {cert.abort_reason}")


@cli.command()
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--generations", type=int, default=30, show_default=True)
@click.pass_context
def tune(ctx, system, scheme, h, controller, episodes, generations):
    """CMA-ES fine-tuning of an expression controller's constants."""
    cfg = _mdp(ctx, system, scheme, h, None)
    spec = _controller(ctx, controller, cfg)
    try:
        tuned = fine_tune(spec, cfg, n_episodes=episodes, seed=ctx.obj["seed"], generations=generations)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bw = _writer(ctx, "tune", {"mdp": cfg.to_dict(), "controller": spec.to_dict(), "episodes": episodes})
    bw.write_json("controller.json", tuned.to_dict())
    bw.finish()
    text = getattr(tuned, "text", tuned.name)
    click.echo(f"tuned: {text}")


@cli.command()
@_system_opt
@_scheme_opt
@_h_opt
@_ctrl_opt
@_reward_opt
@click.option("--episodes", "episode_len", type=int, default=None, help="search episode length N")
@click.option("--restarts", type=int, default=None)
@click.option("--generations", "max_generations", type=int, default=None)
@click.option("--top-k", type=int, default=5, show_default=True)
@click.option("--n-random", type=int, default=100, show_default=True)
@click.option("--r-star", type=float, default=1e-4, show_default=True)
@click.option("--blowup-cap", type=float, default=0.1, show_default=True)
@click.option("--guards/--no-guards", default=True, show_default=True)
@click.pass_context
def pipeline(ctx, system, scheme, h, controller, reward_action, episode_len, restarts, max_generations, top_k,
             n_random, r_star, blowup_cap, guards):
    """Search, detect recurrences, prove orbits and certify every candidate."""
    cfg = _mdp(ctx, system, scheme, h, None, reward_action)
    spec = _controller(ctx, controller, cfg)
    sc = _search(ctx, cfg, episode_len=episode_len, restarts=restarts, max_generations=max_generations)
    res = cmd_pipeline(cfg, spec, sc, n_random=n_random, top_k=top_k, r_star=r_star, blowup_cap=blowup_cap,
                       guards=guards, threads=ctx.obj["threads"], out_dir=ctx.obj["out"])
    n_orbits = sum(len(r.orbits) for r in res.reports)
    click.echo(f"threshold M = {res.threshold_M:.4f}; {len(res.reports)} candidate(s) above M; "
               f"{n_orbits} orbit(s) proven")
    for k, rep in enumerate(res.reports):
        orbs = ", ".join(f"m={o.m} j={o.j}" for o in rep.orbits) or "none"
        click.echo(f"  [{k}] penalty {rep.candidate.accumulated_penalty:.3f}; orbits: {orbs}")
    if res.proof_failures_present:
        raise _Exit(EXIT_PROOF_FAILURES)


@cli.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
@click.pass_context
def report(ctx, bundle):
    """Print the summary table of a pipeline bundle."""
    summary = summarize_bundle(bundle)
    click.echo(f"threshold M = {summary['threshold_M']:.4f}")
    for row in summary["rows"]:
        orbit = f"m={row['m']} j={row['j']} max reward <= {row['max_step_reward_hi']}" if row["orbit_proven"] == "True" \
            else "no orbit"
        click.echo(f"  [{row['candidate']}] penalty {float(row['accumulated_penalty']):.3f}; {orbit}; "
                   f"certified {row['steps_certified']} steps")


def main(argv=None) -> int:
    """Run the CLI and return the process exit code."""
    try:
        cli.main(args=argv, prog_name="controlcap", standalone_mode=False)
    except _Exit as exc:
        return exc.code
    except _CONFIG_ERRORS as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG if isinstance(exc, click.UsageError) else exc.exit_code
    except ControlCapError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 1
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
