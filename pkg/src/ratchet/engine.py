"""Exact event-driven simulation of the truncated lattice processes.

Each simulator keeps one slot per site of the active box, a cached rate
per slot and a binary sum tree over the slots. A step draws an
exponential waiting time at the total rate, descends the tree to pick a
deme, then scans that deme's channels linearly. Only the slots touched
by an event are recomputed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

from .errors import DominationBroken, HorizonOverflow, NonMonotoneDeath, SnapshotMismatch
from .model import (
    Configuration,
    ModelParams,
    TruncationParams,
    dump_configuration,
    load_configuration,
    params_from_dict,
    params_to_dict,
    poly_deriv,
)
from .rates import RateVector, birth_split, deme_rate_vector, q_scaled
from .rng import Stream, seed_stream

DEFAULT_EVENT_CAP = 10_000_000
FORMAT_VERSION = 1

MIGRATE_LEFT = 0
MIGRATE_RIGHT = 1
BIRTH = 2
DEATH = 3
KIND_NAMES = {MIGRATE_LEFT: "MigrateLeft", MIGRATE_RIGHT: "MigrateRight",
              BIRTH: "Birth", DEATH: "Death"}


class EventRecord(NamedTuple):
    time: float
    deme: int
    kind: int
    k: int
    mutated: bool
    totals: tuple  # post-event totals at the source deme (and target, for migration)


@dataclass
class Trajectory:
    process: str  # "eta" or "zeta"
    init: Configuration
    params: ModelParams
    trunc: TruncationParams
    seed: int
    horizon: float
    events: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (time, Configuration)
    final: Configuration | None = None


@dataclass
class PairTrajectory:
    eta: Trajectory
    zeta: Trajectory
    checks: int = 0  # number of deme comparisons performed


class SumTree:
    """Binary sum tree over a fixed number of non-negative leaves.

    Internal nodes are recomputed from their children on every update, so
    the stored totals never drift.
    """

    def __init__(self, n: int):
        cap = 1
        while cap < max(n, 1):
            cap *= 2
        self.cap = cap
        self.n = n
        self.tree = [0.0] * (2 * cap)

    def set(self, i: int, value: float) -> None:
        t = self.tree
        j = i + self.cap
        t[j] = value
        j >>= 1
        while j:
            t[j] = t[2 * j] + t[2 * j + 1]
            j >>= 1

    def get(self, i: int) -> float:
        return self.tree[i + self.cap]

    def total(self) -> float:
        return self.tree[1]

    def find(self, u: float) -> int:
        """Leaf whose cumulative interval contains ``u``; ties go left."""
        t = self.tree
        j = 1
        cap = self.cap
        while j < cap:
            left = t[2 * j]
            if u < left or t[2 * j + 1] <= 0.0:
                j = 2 * j
            else:
                u -= left
                j = 2 * j + 1
        return j - cap

    def check(self) -> bool:
        t = self.tree
        return all(t[j] == t[2 * j] + t[2 * j + 1] for j in range(1, self.cap))


def _as_int_seed(seed) -> int:
    if isinstance(seed, tuple):
        return seed_stream(*seed)
    return int(seed)


class _Loop:
    """Shared Gillespie driver; subclasses supply slot rates and event firing."""

    def __init__(self, n_slots: int, stream: Stream, horizon: float,
                 observe: Sequence[float], cap: int):
        self.tree = SumTree(n_slots)
        self.stream = stream
        self.horizon = float(horizon)
        self.observe = sorted(t for t in observe if 0 <= t <= horizon)
        self.cap = cap
        self.clock = 0.0
        self.n_events = 0
        self.on_event: Callable | None = None

    def slot_rate(self, slot: int) -> float:
        raise NotImplementedError

    def fire(self, slot: int) -> tuple:
        """Apply one event at ``slot``; return the slots whose rates changed."""
        raise NotImplementedError

    def snapshot(self) -> Configuration:
        raise NotImplementedError

    def refresh(self, slot: int) -> None:
        self.tree.set(slot, self.slot_rate(slot))

    def run(self) -> list:
        snaps = []
        obs = self.observe
        oi = 0
        tree = self.tree
        stream = self.stream
        while True:
            total = tree.total()
            if total <= 0.0:
                break
            t_next = self.clock + stream.exponential(total)
            while oi < len(obs) and obs[oi] < t_next:
                if obs[oi] >= self.clock:
                    snaps.append((obs[oi], self.snapshot()))
                oi += 1
            if t_next > self.horizon:
                break
            self.clock = t_next
            slot = tree.find(stream.uniform() * total)
            for s in self.fire(slot):
                self.refresh(s)
            self.n_events += 1
            if self.n_events > self.cap:
                raise HorizonOverflow(
                    f"event cap {self.cap} exceeded at time {self.clock:.6g}")
            if self.on_event is not None:
                self.on_event(self)
        while oi < len(obs):
            snaps.append((obs[oi], self.snapshot()))
            oi += 1
        return snaps


def _pick_weighted(hist: Mapping[int, int], u: float, n: int) -> int:
    """Type of a uniformly chosen particle; ``u`` uniform on ``[0, n)``."""
    acc = 0
    for k in sorted(hist):
        acc += hist[k]
        if u < acc:
            return k
    return max(hist)


# ------------------------------------------------------------------- eta^n


class EtaSimulator(_Loop):
    """The truncated process: frozen exterior, births only up to ``K_n``."""

    def __init__(self, init: Configuration, p: ModelParams, t: TruncationParams,
                 horizon: float, stream: Stream, observe: Sequence[float] = (),
                 cap: int = DEFAULT_EVENT_CAP, record: bool = True):
        self.I = t.half_width(p.L)
        D = 2 * self.I + 1
        super().__init__(D, stream, horizon, observe, cap)
        self.p, self.t = p, t
        self.half_m = p.m / 2
        self.record = record
        self.events: list[EventRecord] = []
        self.counts: list[dict] = [dict() for _ in range(D)]
        self.n: list[int] = [0] * D
        self.exterior: dict[int, dict] = {}
        for site, k, c in init:
            if -self.I <= site <= self.I:
                self.counts[site + self.I][k] = c
                self.n[site + self.I] += c
            else:
                self.exterior.setdefault(site, {})[k] = c
        self.support_radius = init.support_radius
        self.rv: list[RateVector] = [RateVector()] * D
        self.mig: list[float] = [0.0] * D
        for s in range(D):
            self.refresh(s)

    def dirs(self, slot: int) -> int:
        return (slot > 0) + (slot < len(self.n) - 1)

    def compute_slot(self, slot: int) -> tuple[RateVector, float]:
        rv = deme_rate_vector(self.counts[slot], self.p, self.t)
        mig = self.half_m * self.n[slot] * self.dirs(slot)
        return rv, mig

    def slot_rate(self, slot: int) -> float:
        rv, mig = self.compute_slot(slot)
        self.rv[slot], self.mig[slot] = rv, mig
        return float(rv.total) + mig

    def _add(self, slot: int, k: int, delta: int) -> None:
        h = self.counts[slot]
        c = h.get(k, 0) + delta
        if c:
            h[k] = c
        else:
            del h[k]
        self.n[slot] += delta

    def fire(self, slot: int) -> tuple:
        stream = self.stream
        rv = self.rv[slot]
        u = stream.uniform() * self.tree.get(slot)
        site = slot - self.I
        for k, r in rv.births.items():
            if u < r:
                kept, mutated = birth_split(k, self.counts[slot], self.p)
                is_mut = stream.uniform() * (kept + mutated) >= kept
                self._add(slot, k, +1)
                self._log(site, BIRTH, k, is_mut, (self.n[slot],))
                return (slot,)
            u -= r
        deaths = list(rv.deaths.items())
        for i, (k, r) in enumerate(deaths):
            if u < r or (i == len(deaths) - 1 and self.mig[slot] <= 0.0):
                self._add(slot, k, -1)
                self._log(site, DEATH, k, False, (self.n[slot],))
                return (slot,)
            u -= r
        # migration of a uniformly chosen particle
        left_ok = slot > 0
        right_ok = slot < len(self.n) - 1
        if left_ok and right_ok:
            go_left = stream.uniform() < 0.5
        else:
            go_left = left_ok
        k = _pick_weighted(self.counts[slot], stream.uniform() * self.n[slot], self.n[slot])
        dst = slot - 1 if go_left else slot + 1
        self._add(slot, k, -1)
        self._add(dst, k, +1)
        self._log(site, MIGRATE_LEFT if go_left else MIGRATE_RIGHT, k, False,
                  (self.n[slot], self.n[dst]))
        return (slot, dst)

    def _log(self, site, kind, k, mutated, totals):
        if self.record:
            self.events.append(EventRecord(self.clock, site, kind, k, mutated, totals))

    def snapshot(self) -> Configuration:
        d = {s: dict(h) for s, h in self.exterior.items()}
        for slot, h in enumerate(self.counts):
            if h:
                d[slot - self.I] = dict(h)
        return Configuration.from_dict(d, max(self.support_radius, self.I))

    def cache_coherent(self) -> bool:
        """Recompute every slot from scratch and compare with the cache."""
        for s in range(len(self.n)):
            rv, mig = self.compute_slot(s)
            if rv != self.rv[s] or mig != self.mig[s]:
                return False
            if self.tree.get(s) != float(rv.total) + mig:
                return False
            if self.n[s] != sum(self.counts[s].values()):
                return False
        return self.tree.check()


def simulate_eta_n(init: Configuration, p: ModelParams, t: TruncationParams,
                   horizon: float, seed, observe: Sequence[float] = (),
                   cap: int = DEFAULT_EVENT_CAP, record: bool = True,
                   on_event: Callable | None = None) -> Trajectory:
    """Exact sample path of the truncated process up to ``horizon``.

    ``seed`` is either a stream key or a ``(master_seed, replicate)`` pair.
    """
    key = _as_int_seed(seed)
    sim = EtaSimulator(init, p, t, horizon, Stream(key), observe, cap, record)
    sim.on_event = on_event
    snaps = sim.run()
    return Trajectory("eta", init, p, t, key, float(horizon), sim.events, snaps,
                      sim.snapshot())


# ------------------------------------------------------------------- zeta


def zeta_counts_from(c: Configuration) -> dict[int, int]:
    """Initial dominating counts: the per-site total of an eta-configuration."""
    return {s: n for s, n in c.totals().items() if n}


class ZetaSimulator(_Loop):
    """Mutation-free dominating process, optionally with a birth cutoff."""

    def __init__(self, init_counts: Mapping[int, int], p: ModelParams, t: TruncationParams,
                 horizon: float, stream: Stream, kappa: int | None = None,
                 observe: Sequence[float] = (), cap: int = DEFAULT_EVENT_CAP,
                 record: bool = True):
        self.I = t.half_width(p.L)
        D = 2 * self.I + 1
        super().__init__(D, stream, horizon, observe, cap)
        self.p, self.t = p, t
        self.kappa = kappa
        self.birth_cap = None if kappa is None else p.N * kappa
        self.half_m = p.m / 2
        self.record = record
        self.events: list[EventRecord] = []
        self.z: list[int] = [0] * D
        self.exterior: dict[int, int] = {}
        for site, c in init_counts.items():
            if -self.I <= site <= self.I:
                self.z[site + self.I] = c
            elif c:
                self.exterior[site] = c
        self.support_radius = max([abs(s) for s in init_counts] + [self.I])
        self.rates: list[tuple] = [(0.0, 0.0, 0.0)] * D
        for s in range(D):
            self.refresh(s)

    def birth_per_particle(self, n: int) -> float:
        if self.birth_cap is not None and n > self.birth_cap:
            return 0.0
        return float(q_scaled(self.p.q_plus, self.p.N, n))

    def compute_slot(self, slot: int) -> tuple:
        n = self.z[slot]
        if not n:
            return (0.0, 0.0, 0.0)
        b = n * self.birth_per_particle(n)
        d = n * float(q_scaled(self.p.q_minus, self.p.N, n))
        dirs = (slot > 0) + (slot < len(self.z) - 1)
        return (b, d, self.half_m * n * dirs)

    def slot_rate(self, slot: int) -> float:
        r = self.compute_slot(slot)
        self.rates[slot] = r
        return r[0] + r[1] + r[2]

    def fire(self, slot: int) -> tuple:
        b, d, _ = self.rates[slot]
        u = self.stream.uniform() * self.tree.get(slot)
        site = slot - self.I
        if u < b:
            self.z[slot] += 1
            self._log(site, BIRTH, (self.z[slot],))
            return (slot,)
        if u < b + d or self.rates[slot][2] <= 0.0:
            self.z[slot] -= 1
            self._log(site, DEATH, (self.z[slot],))
            return (slot,)
        left_ok = slot > 0
        right_ok = slot < len(self.z) - 1
        go_left = self.stream.uniform() < 0.5 if (left_ok and right_ok) else left_ok
        dst = slot - 1 if go_left else slot + 1
        self.z[slot] -= 1
        self.z[dst] += 1
        self._log(site, MIGRATE_LEFT if go_left else MIGRATE_RIGHT,
                  (self.z[slot], self.z[dst]))
        return (slot, dst)

    def _log(self, site, kind, totals):
        if self.record:
            self.events.append(EventRecord(self.clock, site, kind, 0, False, totals))

    def counts(self) -> dict[int, int]:
        d = dict(self.exterior)
        for slot, c in enumerate(self.z):
            if c:
                d[slot - self.I] = c
        return d

    def snapshot(self) -> Configuration:
        return Configuration.from_dict({s: {0: c} for s, c in self.counts().items()},
                                       self.support_radius)


def simulate_zeta(init_counts: Mapping[int, int] | Configuration, p: ModelParams,
                  t: TruncationParams, horizon: float, seed, kappa: int | None = None,
                  observe: Sequence[float] = (), cap: int = DEFAULT_EVENT_CAP,
                  record: bool = True, on_event: Callable | None = None) -> Trajectory:
    """Sample path of the dominating process (``kappa`` overrides ``t.kappa``)."""
    if isinstance(init_counts, Configuration):
        init_counts = zeta_counts_from(init_counts)
    if kappa is None:
        kappa = t.kappa
    key = _as_int_seed(seed)
    sim = ZetaSimulator(init_counts, p, t, horizon, Stream(key), kappa, observe, cap, record)
    sim.on_event = on_event
    snaps = sim.run()
    init = Configuration.from_dict({s: {0: c} for s, c in init_counts.items()})
    trunc = TruncationParams(t.lambda_n, t.K_n, kappa)
    return Trajectory("zeta", init, p, trunc, key, float(horizon), sim.events, snaps,
                      sim.snapshot())


# ------------------------------------------------------------------- domination pair


def is_nondecreasing_on_halfline(coeffs: Sequence) -> bool:
    from .model import is_nonnegative_on_halfline
    return is_nonnegative_on_halfline(poly_deriv(coeffs))


class DominationSimulator(_Loop):
    """Joint construction of the truncated process and its dominating process.

    Every eta-particle has a zeta-partner; zeta may also carry unpaired
    "extra" particles, so ``zeta(x) = ||eta(x)|| + extra(x)``. Pairs share
    migration and death events. Births are split into joint, eta-only
    (an extra becomes the new partner) and partner-only parts so that both
    marginals have the correct rates and ``extra`` never goes negative.
    """

    def __init__(self, init: Configuration, p: ModelParams, t: TruncationParams,
                 horizon: float, stream: Stream, observe: Sequence[float] = (),
                 cap: int = DEFAULT_EVENT_CAP, record: bool = True):
        self.I = t.half_width(p.L)
        D = 2 * self.I + 1
        super().__init__(D, stream, horizon, observe, cap)
        self.p, self.t = p, t
        self.K = t.K_n
        self.s = p.fitness_table(t.K_n + 1)
        self.mu = float(p.mu)
        self.half_m = p.m / 2
        self.record = record
        self.eta_events: list[EventRecord] = []
        self.zeta_events: list[EventRecord] = []
        self.counts: list[dict] = [dict() for _ in range(D)]
        self.n: list[int] = [0] * D
        self.extra: list[int] = [0] * D
        self.exterior: dict[int, dict] = {}
        for site, k, c in init:
            if -self.I <= site <= self.I:
                self.counts[site + self.I][k] = c
                self.n[site + self.I] += c
            else:
                self.exterior.setdefault(site, {})[k] = c
        self.support_radius = max(init.support_radius, self.I)
        self.channels: list[tuple] = [()] * D
        self.checks = 0
        for s in range(D):
            self.refresh(s)

    def compute_slot(self, slot: int) -> tuple:
        n, e = self.n[slot], self.extra[slot]
        z = n + e
        if not z:
            return ()
        p = self.p
        qpn = float(q_scaled(p.q_plus, p.N, n))
        qpz = float(q_scaled(p.q_plus, p.N, z))
        qmn = float(q_scaled(p.q_minus, p.N, n))
        qmz = float(q_scaled(p.q_minus, p.N, z))
        if qmn > qmz:
            raise DominationBroken("paired death rate exceeds dominating death rate")
        joint = []      # (k, rate) joint births by eta type
        eta_only = []
        partner = []
        for k in sorted(self.counts[slot]):
            c = self.counts[slot][k]
            b_eta = self.s[k] * qpn if k <= self.K else 0.0
            joint.append((k, c * min(b_eta, qpz)))
            eta_only.append((k, c * max(b_eta - qpz, 0.0)))
            partner.append((k, c * max(qpz - b_eta, 0.0)))
        dirs = (slot > 0) + (slot < len(self.n) - 1)
        return (
            joint, eta_only, partner,
            e * qpz,               # extra births
            n * qmn,               # joint deaths
            n * (qmz - qmn),       # partner-only deaths
            e * qmz,               # extra deaths
            self.half_m * z * dirs,  # migration
        )

    def slot_rate(self, slot: int) -> float:
        ch = self.compute_slot(slot)
        self.channels[slot] = ch
        if not ch:
            return 0.0
        total = 0.0
        for group in ch[:3]:
            for _, r in group:
                total += r
        for r in ch[3:]:
            total += r
        return total

    def _add(self, slot, k, delta):
        h = self.counts[slot]
        c = h.get(k, 0) + delta
        if c:
            h[k] = c
        else:
            del h[k]
        self.n[slot] += delta

    def _offspring(self, k: int) -> int | None:
        """Mutation coin; ``None`` when the mutant would exceed ``K_n``."""
        if self.stream.uniform() < self.mu:
            return None if k + 1 > self.K else k + 1
        return k

    def fire(self, slot: int) -> tuple:
        ch = self.channels[slot]
        u = self.stream.uniform() * self.tree.get(slot)
        site = slot - self.I
        joint, eta_only, partner = ch[0], ch[1], ch[2]
        for k, r in joint:
            if u < r:
                off = self._offspring(k)
                if off is None:
                    self.extra[slot] += 1
                else:
                    self._add(slot, off, +1)
                    self._log_eta(site, BIRTH, off, off != k, (self.n[slot],))
                self._log_zeta(site, BIRTH, slot)
                return (slot,)
            u -= r
        for k, r in eta_only:
            if u < r:
                off = self._offspring(k)
                if off is not None:
                    self._add(slot, off, +1)
                    self.extra[slot] -= 1
                    self._log_eta(site, BIRTH, off, off != k, (self.n[slot],))
                return (slot,)
            u -= r
        for k, r in partner:
            if u < r:
                self.extra[slot] += 1
                self._log_zeta(site, BIRTH, slot)
                return (slot,)
            u -= r
        extra_birth, joint_death, partner_death, extra_death, _ = ch[3:]
        if u < extra_birth:
            self.extra[slot] += 1
            self._log_zeta(site, BIRTH, slot)
            return (slot,)
        u -= extra_birth
        if u < joint_death:
            k = _pick_weighted(self.counts[slot], self.stream.uniform() * self.n[slot],
                               self.n[slot])
            self._add(slot, k, -1)
            self._log_eta(site, DEATH, k, False, (self.n[slot],))
            self._log_zeta(site, DEATH, slot)
            return (slot,)
        u -= joint_death
        if u < partner_death + extra_death or ch[7] <= 0.0:
            # partner dies and an extra takes its place, or an extra dies
            self.extra[slot] -= 1
            self._log_zeta(site, DEATH, slot)
            return (slot,)
        # migration of a uniformly chosen zeta particle (with its eta partner)
        left_ok = slot > 0
        right_ok = slot < len(self.n) - 1
        go_left = self.stream.uniform() < 0.5 if (left_ok and right_ok) else left_ok
        dst = slot - 1 if go_left else slot + 1
        z = self.n[slot] + self.extra[slot]
        v = self.stream.uniform() * z
        kind = MIGRATE_LEFT if go_left else MIGRATE_RIGHT
        if v < self.n[slot]:
            k = _pick_weighted(self.counts[slot], v, self.n[slot])
            self._add(slot, k, -1)
            self._add(dst, k, +1)
            self._log_eta(site, kind, k, False, (self.n[slot], self.n[dst]))
        else:
            self.extra[slot] -= 1
            self.extra[dst] += 1
        if self.record:
            self.zeta_events.append(EventRecord(
                self.clock, site, kind, 0, False,
                (self.n[slot] + self.extra[slot], self.n[dst] + self.extra[dst])))
        return (slot, dst)

    def _log_eta(self, site, kind, k, mutated, totals):
        if self.record:
            self.eta_events.append(EventRecord(self.clock, site, kind, k, mutated, totals))

    def _log_zeta(self, site, kind, slot):
        if self.record:
            self.zeta_events.append(EventRecord(
                self.clock, site, kind, 0, False, (self.n[slot] + self.extra[slot],)))

    def refresh(self, slot: int) -> None:
        super().refresh(slot)
        self.checks += 1
        if self.extra[slot] < 0:
            raise DominationBroken(
                f"zeta below ||eta|| at site {slot - self.I}, time {self.clock}")

    def eta_config(self) -> Configuration:
        d = {s: dict(h) for s, h in self.exterior.items()}
        for slot, h in enumerate(self.counts):
            if h:
                d[slot - self.I] = dict(h)
        return Configuration.from_dict(d, self.support_radius)

    def zeta_counts(self) -> dict[int, int]:
        d = {s: sum(h.values()) for s, h in self.exterior.items()}
        for slot in range(len(self.n)):
            z = self.n[slot] + self.extra[slot]
            if z:
                d[slot - self.I] = z
        return d

    def snapshot(self) -> Configuration:
        return self.eta_config()


def simulate_domination_pair(init: Configuration, p: ModelParams, t: TruncationParams,
                             horizon: float, seed, cap: int = DEFAULT_EVENT_CAP,
                             record: bool = True,
                             on_event: Callable | None = None) -> PairTrajectory:
    """Run the truncated process and its dominating process on one event stream."""
    if not is_nondecreasing_on_halfline(p.q_minus):
        raise NonMonotoneDeath("pathwise domination requires a non-decreasing q_minus")
    key = _as_int_seed(seed)
    sim = DominationSimulator(init, p, t, horizon, Stream(key), (), cap, record)
    sim.on_event = on_event
    sim.run()
    zinit = zeta_counts_from(init)
    eta = Trajectory("eta", init, p, t, key, float(horizon), sim.eta_events, [],
                     sim.eta_config())
    zeta = Trajectory("zeta", Configuration.from_dict({s: {0: c} for s, c in zinit.items()}),
                      p, t, key, float(horizon), sim.zeta_events, [],
                      Configuration.from_dict({s: {0: c} for s, c in sim.zeta_counts().items()}))
    return PairTrajectory(eta, zeta, sim.checks)


# ------------------------------------------------------------------- replay


def _apply(d: dict, rec: EventRecord, L: float) -> tuple[int, ...]:
    site = rec.deme
    h = d.setdefault(site, {})
    if rec.kind == BIRTH:
        h[rec.k] = h.get(rec.k, 0) + 1
        touched = (site,)
    elif rec.kind == DEATH:
        h[rec.k] = h.get(rec.k, 0) - 1
        touched = (site,)
    else:
        dst = site - 1 if rec.kind == MIGRATE_LEFT else site + 1
        h[rec.k] = h.get(rec.k, 0) - 1
        g = d.setdefault(dst, {})
        g[rec.k] = g.get(rec.k, 0) + 1
        touched = (site, dst)
    for s in touched:
        if any(c < 0 for c in d[s].values()):
            raise SnapshotMismatch(f"negative count at site {s} while replaying")
        d[s] = {k: c for k, c in d[s].items() if c}
    return touched


def replay(traj: Trajectory, until: float | None = None) -> Configuration:
    """Reapply the recorded events, checking totals and snapshots on the way."""
    d = traj.init.to_dict()
    snaps = list(traj.snapshots)
    si = 0
    radius = traj.final.support_radius if traj.final is not None else traj.init.support_radius

    def check_snaps(upto: float):
        nonlocal si
        while si < len(snaps) and snaps[si][0] < upto:
            got = Configuration.from_dict(d, snaps[si][1].support_radius)
            if got != snaps[si][1]:
                raise SnapshotMismatch(f"snapshot at t={snaps[si][0]} differs")
            si += 1

    for rec in traj.events:
        if until is not None and rec.time > until:
            break
        check_snaps(rec.time)
        touched = _apply(d, rec, traj.params.L)
        got = tuple(sum(d[s].values()) for s in touched)
        if got != tuple(rec.totals):
            raise SnapshotMismatch(f"deme totals differ after event at t={rec.time}")
    if until is None:
        check_snaps(float("inf"))
    out = Configuration.from_dict(d, radius)
    if until is None and traj.final is not None and out != traj.final:
        raise SnapshotMismatch("final configuration differs")
    return out


def state_at(traj: Trajectory, time: float) -> Configuration:
    """Configuration at ``time`` (after all events at or before it)."""
    return replay(traj, until=time)


# ------------------------------------------------------------------- serialization

_REC = struct.Struct("<dqBqBB")


def dump_trajectory(traj: Trajectory) -> bytes:
    """Text header followed by a length-prefixed binary record stream."""
    L = traj.params.L
    init_text = dump_configuration(traj.init, L).encode()
    final_text = dump_configuration(traj.final, L).encode() if traj.final is not None else b""
    header = {
        "version": FORMAT_VERSION,
        "process": traj.process,
        "seed": str(traj.seed),
        "horizon": repr(traj.horizon),
        "params": params_to_dict(traj.params),
        "trunc": {"lambda_n": traj.trunc.lambda_n, "K_n": traj.trunc.K_n,
                  "kappa": traj.trunc.kappa},
    }
    buf = io.BytesIO()
    buf.write(b"ratchet-trajectory\n")
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(f"init {len(init_text)}\n".encode() + init_text)
    buf.write(f"final {len(final_text)}\n".encode() + final_text)
    buf.write(b"records\n")
    for rec in traj.events:
        payload = b"\x00" + _REC.pack(rec.time, rec.deme, rec.kind, rec.k,
                                       int(rec.mutated), len(rec.totals))
        payload += struct.pack(f"<{len(rec.totals)}q", *rec.totals)
        buf.write(struct.pack("<I", len(payload)) + payload)
    for time, cfg in traj.snapshots:
        text = dump_configuration(cfg, L).encode()
        payload = b"\x01" + struct.pack("<d", time) + text
        buf.write(struct.pack("<I", len(payload)) + payload)
    return buf.getvalue()


def load_trajectory(data: bytes) -> Trajectory:
    f = io.BytesIO(data)
    if f.readline() != b"ratchet-trajectory\n":
        raise ValueError("not a trajectory file")
    header = json.loads(f.readline())
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported trajectory version {header['version']}")
    n_init = int(f.readline().split()[1])
    init, _ = load_configuration(f.read(n_init).decode())
    n_final = int(f.readline().split()[1])
    final = load_configuration(f.read(n_final).decode())[0] if n_final else None
    if f.readline() != b"records\n":
        raise ValueError("missing record section")
    events, snaps = [], []
    while True:
        head = f.read(4)
        if not head:
            break
        (length,) = struct.unpack("<I", head)
        payload = f.read(length)
        if payload[0] == 1:
            time = struct.unpack_from("<d", payload, 1)[0]
            snaps.append((time, load_configuration(payload[9:].decode())[0]))
            continue
        time, deme, kind, k, mutated, nt = _REC.unpack_from(payload, 1)
        totals = struct.unpack_from(f"<{nt}q", payload, 1 + _REC.size)
        events.append(EventRecord(time, deme, kind, k, bool(mutated), tuple(totals)))
    tr = header["trunc"]
    return Trajectory(header["process"], init, params_from_dict(header["params"]),
                      TruncationParams(tr["lambda_n"], tr["K_n"], tr["kappa"]),
                      int(header["seed"]), float(header["horizon"]), events, snaps, final)
