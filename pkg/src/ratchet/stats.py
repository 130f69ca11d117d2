"""Observables and verification statistics over trajectory collections."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .engine import BIRTH, DEATH, Trajectory, simulate_eta_n, state_at
from .model import Configuration, ModelParams, TruncationParams
from .rng import seed_stream


def fmt_float(x: float) -> str:
    """Round-trip float formatting used in every CSV."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(v if isinstance(v, str) else fmt_float(v) for v in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- moments


@dataclass
class MomentReport:
    """Mergeable power sums of ``||eta(T, x)||^p`` per probed site and exponent.

    Power sums are exact integers, so merging replicate sets in any order
    gives the same estimates as pooling the samples.
    """

    N: int
    exponents: tuple
    sites: tuple
    count: int = 0
    sums: dict = field(default_factory=dict)     # (site, p) -> sum of values
    sumsqs: dict = field(default_factory=dict)   # (site, p) -> sum of squared values
    init_sup: dict = field(default_factory=dict)  # p -> sup_x ||eta_0(x)||^p

    def add(self, final: Configuration, init: Configuration | None = None) -> None:
        tot = final.totals()
        for x in self.sites:
            n = tot.get(x, 0)
            for p in self.exponents:
                v = n ** p
                self.sums[(x, p)] = self.sums.get((x, p), 0) + v
                self.sumsqs[(x, p)] = self.sumsqs.get((x, p), 0) + v * v
        if init is not None:
            sup = max(init.totals().values(), default=0)
            for p in self.exponents:
                self.init_sup[p] = max(self.init_sup.get(p, 0), sup ** p)
        self.count += 1

    def merge(self, other: "MomentReport") -> "MomentReport":
        if (self.N, self.exponents, self.sites) != (other.N, other.exponents, other.sites):
            raise ValueError("cannot merge reports over different probes")
        out = MomentReport(self.N, self.exponents, self.sites, self.count + other.count)
        for key in set(self.sums) | set(other.sums):
            out.sums[key] = self.sums.get(key, 0) + other.sums.get(key, 0)
            out.sumsqs[key] = self.sumsqs.get(key, 0) + other.sumsqs.get(key, 0)
        for p in set(self.init_sup) | set(other.init_sup):
            out.init_sup[p] = max(self.init_sup.get(p, 0), other.init_sup.get(p, 0))
        return out

    def mean(self, site: int, p: int) -> float:
        return self.sums.get((site, p), 0) / self.count

    def se(self, site: int, p: int) -> float:
        n = self.count
        if n < 2:
            return math.nan
        s, ss = self.sums.get((site, p), 0), self.sumsqs.get((site, p), 0)
        var = (ss - s * s / n) / (n - 1)
        return math.sqrt(max(var, 0.0) / n)

    def sup_mean(self, p: int) -> float:
        return max(self.mean(x, p) for x in self.sites)

    def normalized_ratio(self, p: int) -> float:
        """``sup_x E||eta(T,x)||^p / (sup_x ||eta_0(x)||^p + N^p)``."""
        return self.sup_mean(p) / (self.init_sup.get(p, 0) + self.N ** p)

    def rows(self) -> list:
        out = []
        for p in self.exponents:
            for x in self.sites:
                out.append((x, p, self.mean(x, p), self.se(x, p), self.count,
                            self.normalized_ratio(p)))
        return out

    def to_csv(self) -> str:
        return csv_text(("site", "p", "mean", "se", "replicates", "normalized_ratio"),
                        self.rows())


def moment_estimate(runs: Iterable[Trajectory | Configuration], p_exponent: int | Sequence[int],
                    sites: Sequence[int], T: float | None = None, N: int | None = None,
                    init: Configuration | None = None) -> MomentReport:
    """Moment report from trajectories (evaluated at ``T``) or final configurations."""
    exps = (p_exponent,) if isinstance(p_exponent, int) else tuple(p_exponent)
    rep = None
    for run in runs:
        if isinstance(run, Trajectory):
            if T is not None and T > run.horizon:
                raise ValueError("trajectory horizon shorter than T")
            final = run.final if T is None or T == run.horizon else state_at(run, T)
            if rep is None:
                rep = MomentReport(run.params.N, exps, tuple(sites))
            rep.add(final, run.init)
        else:
            if rep is None:
                rep = MomentReport(N if N is not None else 1, exps, tuple(sites))
            rep.add(run, init)
    if rep is None:
        rep = MomentReport(N if N is not None else 1, exps, tuple(sites))
    return rep


# ---------------------------------------------------------------- clicks


@dataclass
class ClickRecord:
    times: list = field(default_factory=list)
    levels: list = field(default_factory=list)   # minimum load after each click
    causes: list = field(default_factory=list)
    extinction_time: float | None = None
    deaths: int = 0

    @property
    def extinct(self) -> bool:
        return self.extinction_time is not None


def click_times(traj: Trajectory) -> ClickRecord:
    """Times at which the minimum mutation count over all living particles rises."""
    hist: Counter = Counter()
    for _, k, c in traj.init:
        hist[k] += c
    rec = ClickRecord()
    if not hist:
        rec.extinction_time = 0.0
        return rec
    cur = min(hist)
    for ev in traj.events:
        if ev.kind == BIRTH:
            hist[ev.k] += 1
            continue
        if ev.kind != DEATH:
            continue
        rec.deaths += 1
        hist[ev.k] -= 1
        if hist[ev.k] == 0:
            del hist[ev.k]
        if not hist:
            rec.extinction_time = ev.time
            break
        new = min(hist)
        if new > cur:
            rec.times.append(ev.time)
            rec.levels.append(new)
            rec.causes.append("death")
            cur = new
    return rec


# ---------------------------------------------------------------- difference sets


def difference_mass(a: Configuration, b: Configuration) -> tuple[int, set, set]:
    """``(sum |a - b|, difference set, its spatial projection)``."""
    da, db = a.to_dict(), b.to_dict()
    total = 0
    delta = set()
    for site in set(da) | set(db):
        ha, hb = da.get(site, {}), db.get(site, {})
        for k in set(ha) | set(hb):
            d = abs(ha.get(k, 0) - hb.get(k, 0))
            if d:
                total += d
                delta.add((site, k))
    return total, delta, {s for s, _ in delta}


# ---------------------------------------------------------------- truncation convergence


def window_stats(c: Configuration, window: Sequence[int]) -> dict[str, float]:
    """Per-site totals in the window plus the window's total mutation load."""
    d = c.to_dict()
    out = {}
    load = 0
    for x in window:
        h = d.get(x, {})
        out[f"total[{x}]"] = sum(h.values())
        load += sum(k * n for k, n in h.items())
    out["load"] = load
    return out


@dataclass(frozen=True)
class _ConvergenceJob:
    init: Configuration
    p: ModelParams
    t: TruncationParams
    T: float
    key: int
    window: tuple


def _convergence_replicate(job: _ConvergenceJob) -> dict[str, float]:
    traj = simulate_eta_n(job.init, job.p, job.t, job.T, job.key, record=False)
    return window_stats(traj.final, job.window)


@dataclass
class ConvergenceTable:
    levels: list                 # (lambda_n, K_n)
    stats: list                  # per level: {name: (mean, se)}
    z: list                      # per successive pair: {name: z}
    suppressed: list             # per level: K_n below the largest initial mutation count
    threshold: float = 3.0

    @property
    def final_max_z(self) -> float:
        return max(self.z[-1].values()) if self.z else 0.0

    @property
    def converged(self) -> bool:
        return self.final_max_z <= self.threshold

    def to_csv(self) -> str:
        rows = []
        for i, ((lam, K), st) in enumerate(zip(self.levels, self.stats)):
            for name, (mean, se) in st.items():
                z = self.z[i - 1].get(name, math.nan) if i else math.nan
                rows.append((i, lam, K, name, mean, se, z, str(int(self.suppressed[i]))))
        return csv_text(("level", "lambda_n", "K_n", "statistic", "mean", "se", "z_prev",
                         "suppressed"), rows)


def truncation_convergence(init: Configuration, schedule: Sequence[tuple], window: Sequence[int],
                           T: float, replicates: int, p: ModelParams, seed: int,
                           threshold: float = 3.0, map_fn: Callable = map) -> ConvergenceTable:
    """Window statistics per truncation level, with successive differences in SE units.

    Each level uses its own block of replicate streams, so levels are
    independent samples.
    """
    if replicates < 2:
        raise ValueError("need at least two replicates")
    lams = [float(l) for l, _ in schedule]
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("schedule must be increasing")
    window = tuple(window)
    kmax = max((k for _, k, _ in init), default=0)
    levels, all_stats, suppressed = [], [], []
    for li, (lam, K) in enumerate(schedule):
        t = TruncationParams(lam, int(K))
        jobs = [_ConvergenceJob(init, p, t, T, seed_stream(seed, (li << 32) | r), window)
                for r in range(replicates)]
        samples = list(map_fn(_convergence_replicate, jobs))
        st = {}
        for name in samples[0]:
            a = np.array([s[name] for s in samples], dtype=float)
            st[name] = (float(a.mean()), float(a.std(ddof=1) / math.sqrt(len(a))))
        levels.append((lam, int(K)))
        all_stats.append(st)
        suppressed.append(int(K) < kmax)
    zs = []
    for a, b in zip(all_stats, all_stats[1:]):
        row = {}
        for name in a:
            (m1, s1), (m2, s2) = a[name], b[name]
            se = math.hypot(s1, s2)
            diff = abs(m2 - m1)
            row[name] = diff / se if se > 0 else (0.0 if diff == 0 else math.inf)
        zs.append(row)
    return ConvergenceTable(levels, all_stats, zs, suppressed, threshold)


# ---------------------------------------------------------------- hit-probability regression


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    se: float
    t_stat: float
    upper95: float  # one-sided upper confidence bound on the slope
    p_hat: tuple

    @property
    def negative(self) -> bool:
        return self.upper95 < 0.0


def log_hit_slope(distances: Sequence[float], hits: Sequence[int], trials: Sequence[int]
                  ) -> SlopeFit:
    """Weighted least-squares slope of smoothed log hit frequency against distance.

    Frequencies are smoothed as ``(h + 1/2) / (n + 1)`` so that zero counts
    stay finite; weights are inverse delta-method variances
    ``n p / (1 - p)``.
    """
    R = np.asarray(distances, dtype=float)
    h = np.asarray(hits, dtype=float)
    n = np.asarray(trials, dtype=float)
    ph = (h + 0.5) / (n + 1.0)
    y = np.log(ph)
    w = n * ph / (1.0 - ph)
    X = np.column_stack([np.ones_like(R), R])
    W = np.diag(w)
    cov = np.linalg.inv(X.T @ W @ X)
    beta = cov @ X.T @ W @ y
    se = math.sqrt(cov[1, 1])
    z = sps.norm.ppf(0.95)
    return SlopeFit(float(beta[1]), se, float(beta[1] / se), float(beta[1] + z * se),
                    tuple(float(v) for v in ph))


def nonincreasing_within(hits: Sequence[int], trials: Sequence[int], z: float = 3.0) -> bool:
    """Successive frequencies never increase by more than ``z`` combined SE."""
    for (h1, n1), (h2, n2) in zip(zip(hits, trials), zip(hits[1:], trials[1:])):
        p1, p2 = h1 / n1, h2 / n2
        pooled = (h1 + h2) / (n1 + n2)
        se = math.sqrt(max(pooled * (1 - pooled), 1e-300) * (1 / n1 + 1 / n2))
        if p2 - p1 > z * se:
            return False
    return True
