"""Command-line driver.

Every command reads a TOML run configuration, echoes the fully resolved
configuration to ``<out>/resolved_config.toml`` and writes CSV artifacts
under ``--out``. Exit codes: 0 success, 1 usage or configuration error,
2 invariant or guard violation.
"""

from __future__ import annotations

import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import click
import tomli
import tomli_w

from . import duality, infection, stats
from .engine import (
    KIND_NAMES,
    dump_trajectory,
    simulate_domination_pair,
    simulate_eta_n,
)
from .errors import (
    HorizonOverflow,
    InvariantBroken,
    ParseError,
    RatchetError,
    UsageError,
    ValidationError,
    ViolationError,
)
from .model import (
    Configuration,
    Explicit,
    Geometric,
    ModelParams,
    TruncationParams,
    dump_configuration,
    load_configuration,
    param_violations,
)
from .rng import Stream, seed_stream

PRESETS = ("fisher-kpp", "ratchet", "custom")

SCHEMA: dict[str, dict[str, Any]] = {
    "model": {"preset": "fisher-kpp", "L": 1.0, "m": 1.0, "N": 1, "mu": 0.1, "s": 0.1,
              "fitness": None, "B": 1.0, "q_plus": None, "q_minus": None},
    "truncation": {"lambda": 5.0, "K": 6, "kappa": None, "schedule": None},
    "init": {"generator": "uniform", "occupancy": 1, "half_width": 0, "path": None,
             "sites": None},
    "init_b": {"generator": None, "occupancy": None, "half_width": None, "path": None,
               "sites": None},
    "run": {"horizon": None, "observe": [], "replicates": 10, "seed": None,
            "save_trajectories": False, "event_cap": 10_000_000},
    "couple": {"eps": 0.1, "r": 1.0, "track_labels": True},
    "spread": {"distances": [4, 8, 12, 16], "r": 1.0, "eps": 0.1,
               "background_occupancy": 1, "background_half_width": 20},
    "duality": {"cases": 100, "max_particles": 4, "box_half_width": 2, "rel_tol": 1e-12,
                "tail_alphas": [0.5, 1.0, 2.0], "tail_ratios": [2.0, 5.0, 10.0]},
    "greens": {"types": [0], "site": 0, "grid_points": 64, "z_max": 3.0},
    "moments": {"exponents": [1, 2], "sites": [0], "N_sweep": []},
    "converge": {"window": [0], "z_max": 3.0},
}
REQUIRED = (("run", "horizon"), ("run", "seed"))


@dataclass
class RunConfig:
    params: ModelParams
    trunc: TruncationParams
    schedule: list
    init: Configuration
    init_b: Configuration
    horizon: float
    observe: list
    replicates: int
    seed: int
    options: dict = field(default_factory=dict)   # command sections, defaults filled
    resolved: dict = field(default_factory=dict)  # echo of every setting


def _locate(text: str, section: str, key: str) -> tuple[int, int]:
    """Line and column of ``key`` inside ``[section]`` (1-based; best effort)."""
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if current == section and key is None:
                return i, line.index("[") + 1
            continue
        if current == section and key is not None:
            m = re.match(rf"^(\s*){re.escape(key)}\s*=", line)
            if m:
                return i, len(m.group(1)) + 1
    return 1, 1


def _num(v):
    """TOML scalars plus ``"p/q"`` strings for exact rationals."""
    if isinstance(v, str):
        try:
            return Fraction(v)
        except ValueError as exc:
            raise ValidationError([f"not a number: {v!r}"]) from exc
    return v


def _build_params(m: dict) -> ModelParams:
    preset = m["preset"]
    if preset not in PRESETS:
        raise ValidationError([f"model.preset must be one of {PRESETS}, got {preset!r}"])
    if m["fitness"] is not None:
        fitness = Explicit(_num(v) for v in m["fitness"])
    else:
        fitness = Geometric(_num(m["s"]))
    if preset == "fisher-kpp":
        qp, qm = (1,), (0, 1)
    elif preset == "ratchet":
        B = _num(m["B"])
        qp, qm = (1, B), (0, 1, B)
    else:
        if m["q_plus"] is None or m["q_minus"] is None:
            raise ValidationError(["custom model needs q_plus and q_minus"])
        qp, qm = (), ()
    if m["q_plus"] is not None:
        qp = tuple(_num(c) for c in m["q_plus"])
    if m["q_minus"] is not None:
        qm = tuple(_num(c) for c in m["q_minus"])
    return ModelParams(L=_num(m["L"]), m=_num(m["m"]), N=m["N"], mu=_num(m["mu"]),
                       fitness=fitness, q_plus=qp, q_minus=qm)


def _build_init(sec: dict, base: Path, name: str) -> tuple[Configuration, list[str]]:
    bad = []
    gen = sec["generator"]
    if gen == "uniform":
        if not (isinstance(sec["occupancy"], int) and sec["occupancy"] > 0):
            bad.append(f"{name}.occupancy must be a positive integer")
        if not (isinstance(sec["half_width"], int) and sec["half_width"] >= 0):
            bad.append(f"{name}.half_width must be a non-negative integer")
        if bad:
            return Configuration.empty(), bad
        return Configuration.uniform(sec["occupancy"], sec["half_width"]), bad
    if gen == "empty":
        return Configuration.empty(), bad
    if gen == "sites":
        d: dict = {}
        for row in sec["sites"] or []:
            if len(row) != 3 or any(not isinstance(v, int) for v in row) or row[1] < 0 or row[2] < 0:
                bad.append(f"{name}.sites rows must be [site, k, count] with k, count >= 0")
                continue
            d.setdefault(row[0], {})
            d[row[0]][row[1]] = d[row[0]].get(row[1], 0) + row[2]
        return Configuration.from_dict(d), bad
    if gen == "file":
        if not sec["path"]:
            return Configuration.empty(), [f"{name}.path is required for generator 'file'"]
        path = (base / sec["path"]).resolve()
        if not path.is_file():
            return Configuration.empty(), [f"{name}.path {str(path)!r} does not exist"]
        conf, _ = load_configuration(path.read_text())
        return conf, bad
    return Configuration.empty(), [f"{name}.generator must be uniform, empty, sites or file"]


def parse_config(path: str | os.PathLike, seed: int | None = None,
                 replicates: int | None = None) -> RunConfig:
    """Read, default and validate a run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {str(path)!r}: {exc}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(str(exc), getattr(exc, "lineno", 1), getattr(exc, "colno", 1)) from exc

    for sec, body in raw.items():
        if sec not in SCHEMA:
            line, col = _locate(text, sec, None)
            raise ParseError(f"unknown section [{sec}]", line, col)
        if not isinstance(body, dict):
            line, col = _locate(text, sec, None)
            raise ParseError(f"{sec} must be a table", line, col)
        for key in body:
            if key not in SCHEMA[sec]:
                line, col = _locate(text, sec, key)
                raise ParseError(f"unknown key {sec}.{key}", line, col)

    merged = {sec: {**defaults, **raw.get(sec, {})} for sec, defaults in SCHEMA.items()}
    if seed is not None:
        merged["run"]["seed"] = seed
    if replicates is not None:
        merged["run"]["replicates"] = replicates

    bad: list[str] = []
    for sec, key in REQUIRED:
        if merged[sec][key] is None:
            bad.append(f"missing required setting {sec}.{key}")
    if bad:
        raise ValidationError(bad)

    params = _build_params(merged["model"])
    bad += [msg for _, msg in param_violations(params)]

    tr = merged["truncation"]
    schedule = [(float(l), int(k)) for l, k in (tr["schedule"] or [(tr["lambda"], tr["K"])])]
    if any(b[0] <= a[0] for a, b in zip(schedule, schedule[1:])):
        bad.append("truncation.schedule must be increasing in lambda")
    if any(b[1] < a[1] for a, b in zip(schedule, schedule[1:])):
        bad.append("truncation.schedule must be non-decreasing in K")
    trunc = None
    try:
        trunc = TruncationParams(float(tr["lambda"]), int(tr["K"]), tr["kappa"])
        for lam, K in schedule:
            TruncationParams(lam, K)
    except ValueError as exc:
        bad.append(f"truncation: {exc}")

    run = merged["run"]
    if not (isinstance(run["horizon"], (int, float)) and run["horizon"] >= 0):
        bad.append("run.horizon must be a non-negative number")
    if not (isinstance(run["replicates"], int) and run["replicates"] >= 1):
        bad.append("run.replicates must be a positive integer")
    if not (isinstance(run["seed"], int) and 0 <= run["seed"] < 2 ** 64):
        bad.append("run.seed must be an integer in [0, 2^64)")

    base = path.parent
    init, errs = _build_init(merged["init"], base, "init")
    bad += errs
    b_sec = merged["init_b"]
    if all(v is None for v in b_sec.values()):
        init_b = init
        merged["init_b"] = {k: v for k, v in merged["init"].items()}
    else:
        b_sec = {**SCHEMA["init"], **{k: v for k, v in b_sec.items() if v is not None}}
        merged["init_b"] = b_sec
        init_b, errs = _build_init(b_sec, base, "init_b")
        bad += errs
    if bad:
        raise ValidationError(bad)

    resolved = _strip_none(merged)
    return RunConfig(params, trunc, schedule, init, init_b, float(run["horizon"]),
                     sorted(float(x) for x in run["observe"]), run["replicates"], run["seed"],
                     {k: merged[k] for k in ("couple", "spread", "duality", "greens",
                                             "moments", "converge")} | {"run": run},
                     resolved)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_strip_none(v) for v in d]
    if isinstance(d, Fraction):
        return f"{d.numerator}/{d.denominator}"
    return d


# ---------------------------------------------------------------- workers


@contextmanager
def worker_map(threads: int):
    """``map``-like callable running jobs in a process pool, results in job order."""
    if threads <= 1:
        yield lambda fn, jobs: list(map(fn, jobs))
        return
    with ProcessPoolExecutor(max_workers=threads) as ex:
        def pmap(fn: Callable, jobs):
            jobs = list(jobs)
            chunk = max(1, len(jobs) // (4 * threads))
            return list(ex.map(fn, jobs, chunksize=chunk))
        yield pmap


def _simulate_job(job):
    init, p, t, horizon, key, observe, cap, save = job
    traj = simulate_eta_n(init, p, t, horizon, key, observe, cap, record=True)
    clicks = stats.click_times(traj)
    rows = [(rec.time, rec.deme, KIND_NAMES[rec.kind], rec.k, int(rec.mutated))
            for rec in traj.events]
    blob = dump_trajectory(traj) if save else None
    summary = (len(traj.events), traj.final.mass(), len(clicks.times),
               math.nan if clicks.extinction_time is None else clicks.extinction_time)
    return rows, dump_configuration(traj.final, p.L), blob, summary


def _dominate_job(job):
    init, p, t, horizon, key, cap = job
    pair = simulate_domination_pair(init, p, t, horizon, key, cap, record=False)
    return (pair.checks, pair.eta.final.mass(), pair.zeta.final.mass())


def _couple_job(job):
    a, b, p, t, horizon, eps, seed, idx, r, labels, cap = job
    run = infection.simulate_coupling(a, b, p, t, horizon, eps, seed, idx, r,
                                      record=False, track_labels=labels, cap=cap)
    return run.report, run.guard_checks


def _final_job(job):
    init, p, t, horizon, key, cap = job
    return simulate_eta_n(init, p, t, horizon, key, cap=cap, record=False).final


# ---------------------------------------------------------------- commands


class Ctx:
    def __init__(self, cfg: RunConfig, out: Path, threads: int, quiet: bool):
        self.cfg, self.out, self.threads, self.quiet = cfg, out, threads, quiet

    def write(self, name: str, text: str | bytes) -> None:
        path = self.out / name
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            with open(path, "w", newline="\n") as f:
                f.write(text)

    def say(self, msg: str) -> None:
        if not self.quiet:
            click.echo(msg, err=True)


def _setup(config, out, seed, replicates, threads, quiet) -> Ctx:
    cfg = parse_config(config, seed, replicates)
    if threads is None:
        env = os.environ.get("RATCHET_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError as exc:
            raise UsageError(f"RATCHET_THREADS must be an integer, got {env!r}") from exc
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Ctx(cfg, out, threads, quiet)
    ctx.write("resolved_config.toml", tomli_w.dumps(cfg.resolved))
    return ctx


def common(f):
    f = click.option("--quiet", is_flag=True, help="Suppress progress messages.")(f)
    f = click.option("--threads", type=int, default=None,
                     help="Worker processes (default: RATCHET_THREADS or 1).")(f)
    f = click.option("--replicates", type=int, default=None, help="Override run.replicates.")(f)
    f = click.option("--seed", type=int, default=None, help="Override run.seed.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default="out",
                     show_default=True, help="Output directory.")(f)
    f = click.option("--config", type=click.Path(dir_okay=False), required=True,
                     help="TOML run configuration.")(f)
    return f


@click.group()
def cli():
    """Exact simulator and verification harness for the spatial ratchet model."""


@cli.command()
@common
def simulate(config, out, seed, replicates, threads, quiet):
    """Simulate the truncated process; write events, finals and a summary."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    run = c.options["run"]
    jobs = [(c.init, c.params, c.trunc, c.horizon, seed_stream(c.seed, r), c.observe,
             run["event_cap"], run["save_trajectories"]) for r in range(c.replicates)]
    with worker_map(ctx.threads) as pmap:
        results = pmap(_simulate_job, jobs)
    event_rows, summary_rows = [], []
    for r, (rows, final_text, blob, summary) in enumerate(results):
        event_rows += [(r,) + row for row in rows]
        summary_rows.append((r,) + summary)
        ctx.write(f"final_{r}.txt", final_text)
        if blob is not None:
            ctx.write(f"trajectory_{r}.bin", blob)
    ctx.write("events.csv", stats.csv_text(
        ("replicate", "time", "deme", "kind", "k", "mutated"), event_rows))
    ctx.write("summary.csv", stats.csv_text(
        ("replicate", "events", "final_mass", "clicks", "extinction_time"), summary_rows))
    ctx.say(f"simulated {c.replicates} replicates")


@cli.command()
@common
def dominate(config, out, seed, replicates, threads, quiet):
    """Run the truncated process jointly with its dominating process."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    jobs = [(c.init, c.params, c.trunc, c.horizon, seed_stream(c.seed, r),
             c.options["run"]["event_cap"]) for r in range(c.replicates)]
    with worker_map(ctx.threads) as pmap:
        results = pmap(_dominate_job, jobs)
    ctx.write("dominate.csv", stats.csv_text(
        ("replicate", "checks", "violations", "final_eta_mass", "final_zeta_mass"),
        [(r, chk, 0, me, mz) for r, (chk, me, mz) in enumerate(results)]))
    ctx.say(f"domination held in {c.replicates} replicates")


@cli.command()
@common
def couple(config, out, seed, replicates, threads, quiet):
    """Couple runs from ``init`` and ``init_b``; write the spread report."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["couple"]
    jobs = [(c.init, c.init_b, c.params, c.trunc, c.horizon, o["eps"], c.seed, r, o["r"],
             o["track_labels"], c.options["run"]["event_cap"]) for r in range(c.replicates)]
    with worker_map(ctx.threads) as pmap:
        results = pmap(_couple_job, jobs)
    ctx.write("spread.csv", infection.spread_csv(row for row, _ in results))
    ctx.write("guard.csv", stats.csv_text(("replicate", "guard_checks"),
                                          [(r, g) for r, (_, g) in enumerate(results)]))
    ctx.say(f"{sum(row.hit for row, _ in results)} of {c.replicates} replicates hit")


@cli.command("spread-sweep")
@common
def spread_sweep(config, out, seed, replicates, threads, quiet):
    """Hit probability of a window against the distance of a unit difference."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["spread"]
    bg = Configuration.uniform(o["background_occupancy"], o["background_half_width"])
    hits, trials = [], []
    summary = []
    with worker_map(ctx.threads) as pmap:
        for di, R in enumerate(o["distances"]):
            a = bg + Configuration.from_dict({R: {0: 1}})
            jobs = [(a, bg, c.params, c.trunc, c.horizon, o["eps"], c.seed, (di << 32) | r,
                     o["r"], False, c.options["run"]["event_cap"])
                    for r in range(c.replicates)]
            rows = [row for row, _ in pmap(_couple_job, jobs)]
            ctx.write(f"spread_R{R}.csv", infection.spread_csv(rows))
            h = sum(row.hit for row in rows)
            hits.append(h)
            trials.append(len(rows))
            summary.append((R, len(rows), h, h / len(rows)))
    ctx.write("sweep.csv", stats.csv_text(("distance", "replicates", "hits", "p_hat"), summary))
    if len(hits) >= 2:
        fit = stats.log_hit_slope(o["distances"], hits, trials)
        mono = stats.nonincreasing_within(hits, trials)
        ctx.write("slope.csv", stats.csv_text(
            ("slope", "se", "t", "upper95", "negative", "nonincreasing"),
            [(fit.slope, fit.se, fit.t_stat, fit.upper95, int(fit.negative), int(mono))]))
    ctx.say(f"hits per distance: {hits}")


def _random_conf(stream: Stream, sites: list, max_particles: int) -> dict:
    n = stream.index(max_particles + 1)
    d: dict = {}
    for _ in range(n):
        x = sites[stream.index(len(sites))]
        d[x] = d.get(x, 0) + 1
    return d


@cli.command("duality-check")
@common
def duality_check(config, out, seed, replicates, threads, quiet):
    """Generator symmetry of the duality function plus the tail-bound grid."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["duality"]
    t = TruncationParams(o["box_half_width"] / c.params.L + 1e-9, c.trunc.K_n)
    sites = list(t.sites(c.params.L))
    stream = Stream(seed_stream(c.seed, 0))
    rows, failed = [], 0
    for case in range(o["cases"]):
        xi = _random_conf(stream, sites, o["max_particles"])
        zeta = _random_conf(stream, sites, o["max_particles"])
        first = duality.migration_generator_apply("first", xi, zeta, c.params, t)
        second = duality.migration_generator_apply("second", xi, zeta, c.params, t)
        scale = max(abs(first), abs(second))
        rel = float(abs(first - second) / scale) if scale else 0.0
        ok = rel <= o["rel_tol"]
        failed += not ok
        enc = lambda d: ";".join(f"{x}:{n}" for x, n in sorted(d.items()) if n)
        rows.append((case, enc(xi), enc(zeta), float(first), float(second), rel, str(int(ok))))
    ctx.write("duality.csv", stats.csv_text(
        ("case", "xi", "zeta", "first", "second", "rel_diff", "pass"), rows))
    tails = []
    for alpha in o["tail_alphas"]:
        for ratio in o["tail_ratios"]:
            r = alpha * ratio
            exact = duality.poisson_tail_exact(alpha, r)
            bound = duality.poisson_tail_bound(alpha, r)
            ok = exact <= bound
            failed += not ok
            tails.append((alpha, r, exact, bound, str(int(ok))))
    ctx.write("tails.csv", stats.csv_text(("alpha", "r", "tail", "bound", "pass"), tails))
    if failed:
        raise InvariantBroken(f"{failed} duality rows failed")
    ctx.say(f"{len(rows)}/{len(rows)} symmetry rows pass")


@cli.command("greens-check")
@common
def greens_check(config, out, seed, replicates, threads, quiet):
    """Both sides of the Green's-function representation at one site."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["greens"]
    rep = duality.greens_check(c.init, o["types"], o["site"], c.params, c.trunc, c.horizon,
                               c.replicates, c.seed, o["grid_points"])
    ok = rep.z_score <= o["z_max"]
    ctx.write("greens.csv", stats.csv_text(
        ("lhs", "lhs_se", "rhs", "rhs_se", "kernel_term", "z", "pass"),
        [(rep.lhs.mean, rep.lhs.se, rep.rhs.mean, rep.rhs.se, rep.kernel_term, rep.z_score,
          str(int(ok)))]))
    ctx.say(f"z = {rep.z_score:.3g}")


@cli.command()
@common
def moments(config, out, seed, replicates, threads, quiet):
    """Moment estimates at the horizon, optionally across an N sweep."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["moments"]
    cap = c.options["run"]["event_cap"]
    with worker_map(ctx.threads) as pmap:
        jobs = [(c.init, c.params, c.trunc, c.horizon, seed_stream(c.seed, r), cap)
                for r in range(c.replicates)]
        finals = pmap(_final_job, jobs)
        rep = stats.moment_estimate(finals, o["exponents"], o["sites"], N=c.params.N,
                                    init=c.init)
        ctx.write("moments.csv", rep.to_csv())
        sweep = []
        for si, N in enumerate(o["N_sweep"]):
            p = ModelParams(c.params.L, c.params.m, N, c.params.mu, c.params.fitness,
                            c.params.q_plus, c.params.q_minus)
            init = Configuration.from_dict({0: {0: N}})
            jobs = [(init, p, c.trunc, c.horizon, seed_stream(c.seed, ((si + 1) << 32) | r), cap)
                    for r in range(c.replicates)]
            r2 = stats.moment_estimate(pmap(_final_job, jobs), o["exponents"], [0], N=N,
                                       init=init)
            for e in r2.exponents:
                sweep.append((N, e, r2.sup_mean(e), r2.normalized_ratio(e)))
        if sweep:
            ctx.write("moments_sweep.csv", stats.csv_text(
                ("N", "p", "sup_mean", "normalized_ratio"), sweep))
    ctx.say("moments written")


@cli.command()
@common
def converge(config, out, seed, replicates, threads, quiet):
    """Window statistics across the truncation schedule."""
    ctx = _setup(config, out, seed, replicates, threads, quiet)
    c = ctx.cfg
    o = c.options["converge"]
    with worker_map(ctx.threads) as pmap:
        table = stats.truncation_convergence(c.init, c.schedule, o["window"], c.horizon,
                                             c.replicates, c.params, c.seed, o["z_max"], pmap)
    ctx.write("convergence.csv", table.to_csv())
    ctx.say(f"converged: {table.converged} (final max z {table.final_max_z:.3g})")


def main(argv: list[str] | None = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="ratchet", standalone_mode=False)
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except UsageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (ViolationError, HorizonOverflow) as exc:
        click.echo(f"violation: {exc}", err=True)
        return 2
    except RatchetError as exc:  # pragma: no cover - every subclass is mapped above
        click.echo(f"error: {exc}", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
