"""Five-class coupling of two realizations of the truncated process.

Susceptible (class 0) particles are shared by both realizations and kept
as per-deme type counts. Infected particles (classes 1 and 2) belong to
one realization only; partially recovered particles (classes 1* and 2*)
also belong to one realization and come in co-located dual pairs. Each
realization is the sum of class 0, its infected class and its partially
recovered class, and each is a copy of the truncated process.

Infected and partially recovered particles are tracked individually with
Ulam-Harris labels, jump counters and reinfection counters.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .engine import BIRTH, DEATH, MIGRATE_LEFT, MIGRATE_RIGHT, EventRecord, Trajectory, _Loop
from .errors import GuardViolation, InvariantBroken, NoSuchU, PreconditionViolated
from .model import (
    Configuration,
    ModelParams,
    TruncationParams,
    poly_degree,
    poly_deriv,
    poly_eval,
)
from .rates import q_scaled
from .rng import Stream, seed_stream

# class codes; 3 and 4 are the partially recovered classes 1* and 2*
INF1, INF2, REC1, REC2 = 1, 2, 3, 4
STAR = {INF1: REC1, INF2: REC2}
CLASS_NAMES = {0: "0", INF1: "1", INF2: "2", REC1: "1*", REC2: "2*"}


@dataclass(frozen=True)
class UlamHarris:
    root: int
    path: tuple = ()

    def child(self, j: int) -> "UlamHarris":
        return UlamHarris(self.root, self.path + (j,))

    @property
    def size(self) -> int:
        """``|u|``: the sum of the path entries after the root."""
        return sum(self.path)

    def ancestors(self) -> list["UlamHarris"]:
        return [UlamHarris(self.root, self.path[:i]) for i in range(len(self.path))]

    def __str__(self) -> str:
        return ".".join(str(x) for x in (self.root,) + self.path)


@dataclass
class Particle:
    cls: int
    deme: int
    k: int
    dual: int | None = None
    label: UlamHarris | None = None
    generated: int = 0       # particles generated so far
    jumps: int = 0           # J: jumps by this particle and its ancestors
    inherited_R: int = 0     # reinfections of ancestors before this particle's birth
    reinfections: int = 0    # reinfections of this particle
    ancestry_generations: int = 0  # independent recount of |label|


class Deme:
    __slots__ = ("c0", "n0", "ids")

    def __init__(self):
        self.c0: dict[int, int] = {}
        self.n0 = 0
        self.ids: dict[int, list[int]] = {INF1: [], INF2: [], REC1: [], REC2: []}

    def marginal_total(self, i: int) -> int:
        return self.n0 + len(self.ids[i]) + len(self.ids[STAR[i]])

    def empty(self) -> bool:
        return not self.n0 and not any(self.ids.values())


class CouplingState:
    """Class-resolved coupled configuration."""

    def __init__(self, track_labels: bool = True):
        self.demes: dict[int, Deme] = {}
        self.particles: dict[int, Particle] = {}
        self.pos: dict[int, int] = {}  # particle id -> index in its deme list
        self.next_id = 0
        self.track_labels = track_labels
        self.n_reinfections = 0
        self.max_jumps = 0

    # ----- bookkeeping
    def deme(self, site: int) -> Deme:
        d = self.demes.get(site)
        if d is None:
            d = self.demes[site] = Deme()
        return d

    def add_susceptible(self, site: int, k: int, delta: int) -> None:
        d = self.deme(site)
        c = d.c0.get(k, 0) + delta
        if c < 0:
            raise InvariantBroken(f"negative class-0 count at site {site}")
        if c:
            d.c0[k] = c
        else:
            d.c0.pop(k, None)
        d.n0 += delta

    def _link(self, pid: int) -> None:
        q = self.particles[pid]
        lst = self.deme(q.deme).ids[q.cls]
        self.pos[pid] = len(lst)
        lst.append(pid)

    def _unlink(self, pid: int) -> None:
        q = self.particles[pid]
        lst = self.demes[q.deme].ids[q.cls]
        i = self.pos.pop(pid)
        last = lst.pop()
        if last != pid:
            lst[i] = last
            self.pos[last] = i

    def new_particle(self, cls: int, site: int, k: int, label: UlamHarris | None = None,
                     parent: Particle | None = None) -> int:
        pid = self.next_id
        self.next_id += 1
        q = Particle(cls, site, k, label=label)
        if parent is not None:
            q.jumps = parent.jumps
            q.inherited_R = parent.inherited_R + parent.reinfections
            q.ancestry_generations = parent.ancestry_generations + parent.generated
        self.particles[pid] = q
        self._link(pid)
        return pid

    def remove(self, pid: int) -> None:
        self._unlink(pid)
        del self.particles[pid]

    def set_class(self, pid: int, cls: int) -> None:
        self._unlink(pid)
        self.particles[pid].cls = cls
        self._link(pid)

    def move(self, pid: int, dst: int) -> None:
        self._unlink(pid)
        q = self.particles[pid]
        q.deme = dst
        q.jumps += 1
        self.max_jumps = max(self.max_jumps, q.jumps)
        self._link(pid)

    def child_label(self, parent: Particle) -> UlamHarris | None:
        parent.generated += 1
        if not self.track_labels or parent.label is None:
            return None
        return parent.label.child(parent.generated)

    # ----- views
    def marginal(self, i: int) -> Configuration:
        out: dict[int, dict[int, int]] = {}
        for site, d in self.demes.items():
            h = dict(d.c0)
            for cls in (i, STAR[i]):
                for pid in d.ids[cls]:
                    k = self.particles[pid].k
                    h[k] = h.get(k, 0) + 1
            if h:
                out[site] = h
        return Configuration.from_dict(out)

    def marginal_hist(self, site: int, i: int) -> Counter:
        d = self.demes.get(site)
        if d is None:
            return Counter()
        h = Counter(d.c0)
        for cls in (i, STAR[i]):
            for pid in d.ids[cls]:
                h[self.particles[pid].k] += 1
        return h

    def differs_at(self, site: int) -> bool:
        """Whether the two realizations differ at ``site``."""
        d = self.demes.get(site)
        if d is None:
            return False
        a = Counter(self.particles[pid].k for c in (INF1, REC1) for pid in d.ids[c])
        b = Counter(self.particles[pid].k for c in (INF2, REC2) for pid in d.ids[c])
        return a != b

    def class_counts(self, site: int) -> dict:
        d = self.demes.get(site) or Deme()
        return {0: dict(d.c0), **{c: len(d.ids[c]) for c in (INF1, INF2, REC1, REC2)}}

    def check_deme(self, site: int) -> None:
        """Dual balance, co-location and registry consistency at one deme."""
        d = self.demes.get(site)
        if d is None:
            return
        if len(d.ids[REC1]) != len(d.ids[REC2]):
            raise InvariantBroken(f"dual imbalance at site {site}")
        if d.n0 != sum(d.c0.values()):
            raise InvariantBroken(f"class-0 total mismatch at site {site}")
        for cls, lst in d.ids.items():
            for pid in lst:
                q = self.particles[pid]
                if q.cls != cls or q.deme != site:
                    raise InvariantBroken(f"registry mismatch for particle {pid}")
                if cls in (REC1, REC2):
                    if q.dual is None:
                        raise InvariantBroken(f"partially recovered particle {pid} has no dual")
                    r = self.particles.get(q.dual)
                    if r is None or r.dual != pid or r.deme != site or {q.cls, r.cls} != {REC1, REC2}:
                        raise InvariantBroken(f"broken dual pair at site {site}")
                elif q.dual is not None:
                    raise InvariantBroken(f"infected particle {pid} carries a dual")


def init_coupling(a: Configuration, b: Configuration, track_labels: bool = True) -> CouplingState:
    """Shared particles become class 0; the excesses become classes 1 and 2."""
    st = CouplingState(track_labels)
    da, db = a.to_dict(), b.to_dict()
    root = 0
    for site in sorted(set(da) | set(db)):
        ha, hb = da.get(site, {}), db.get(site, {})
        for k in sorted(set(ha) | set(hb)):
            x, y = ha.get(k, 0), hb.get(k, 0)
            if min(x, y):
                st.add_susceptible(site, k, min(x, y))
        for cls, (h1, h2) in ((INF1, (ha, hb)), (INF2, (hb, ha))):
            for k in sorted(h1):
                for _ in range(max(h1[k] - h2.get(k, 0), 0)):
                    root += 1
                    st.new_particle(cls, site, k, UlamHarris(root) if track_labels else None)
    return st


# ---------------------------------------------------------------- rates


class Channel(NamedTuple):
    kind: str
    i1: int
    i2: int
    total: float
    per_particle: float | None  # None when the rate depends on the particle's type


@dataclass(frozen=True)
class DemeRates:
    channels: tuple
    total: float
    q_plus: tuple   # q_+^N of the two marginal totals
    q_minus: tuple
    A: tuple        # strict-majority indicators for classes 1 and 2

    def get(self, kind: str, i1: int = 0, i2: int = 0) -> Channel:
        for ch in self.channels:
            if ch.kind == kind and ch.i1 == i1 and ch.i2 == i2:
                return ch
        raise KeyError((kind, i1, i2))


def _pos(x: float) -> float:
    return x if x > 0.0 else 0.0


def coupling_rates(state: CouplingState, site: int, p: ModelParams, t: TruncationParams,
                   eps: float | None = None, s_table: Sequence[float] | None = None,
                   dirs: int | None = None) -> DemeRates:
    """Every coupling channel at one deme with its total and per-particle rate.

    With ``eps`` given, the high-density guard is checked as well.
    """
    d = state.demes.get(site) or Deme()
    K = t.K_n
    s = s_table if s_table is not None else p.fitness_table(K + 1)
    n0 = d.n0
    c = {i: len(d.ids[i]) for i in (INF1, INF2)}
    npairs = len(d.ids[REC1])
    n = {i: n0 + c[i] + npairs for i in (INF1, INF2)}
    qp = {i: float(q_scaled(p.q_plus, p.N, n[i])) for i in (INF1, INF2)}
    qm = {i: float(q_scaled(p.q_minus, p.N, n[i])) for i in (INF1, INF2)}
    A = {INF1: c[INF1] > c[INF2], INF2: c[INF2] > c[INF1]}
    if dirs is None:
        I = t.half_width(p.L)
        dirs = (site > -I) + (site < I)
    chans: list[Channel] = []

    mig_pp = p.m / 2 * dirs
    chans.append(Channel("migrate", 0, 0, mig_pp * (n0 + c[INF1] + c[INF2] + npairs), mig_pp))

    for i in (INF1, INF2):
        ssum = 0.0
        for cls in (i, STAR[i]):
            for pid in d.ids[cls]:
                k = state.particles[pid].k
                if k <= K:
                    ssum += s[k]
        chans.append(Channel("birth_infected", i, 0, qp[i] * ssum, None))

    s0sum = 0.0
    for k, cnt in d.c0.items():
        if k <= K:
            s0sum += s[k] * cnt
    qp_min = min(qp[INF1], qp[INF2])
    qm_min = min(qm[INF1], qm[INF2])
    chans.append(Channel("birth_min", 0, 0, qp_min * s0sum, None))

    for i1 in (INF1, INF2):
        for i2 in (INF1, INF2):
            if A[i1]:
                tot = s0sum * _pos(qp[i2] - qp[3 - i2])
                chans.append(Channel("induce", i1, i2, tot, tot / c[i1]))
            else:
                chans.append(Channel("induce", i1, i2, 0.0, 0.0))

    for i in (INF1, INF2):
        chans.append(Channel("death_infected", i, 0, c[i] * qm[i], qm[i]))
    chans.append(Channel("death_min", 0, 0, n0 * qm_min, qm_min))

    for i1 in (INF1, INF2):
        for i2 in (INF1, INF2):
            if A[i1]:
                tot = n0 * _pos(qm[i2] - qm[3 - i2])
                chans.append(Channel("transmit", i1, i2, tot, tot / c[i1]))
            else:
                chans.append(Channel("transmit", i1, i2, 0.0, 0.0))

    chans.append(Channel("pair_death", 0, 0, npairs * qm_min, qm_min))

    for i1 in (INF1, INF2):
        for i2 in (INF1, INF2):
            pp = _pos(qm[i2] - qm[3 - i2]) if A[i1] else 0.0
            chans.append(Channel("partial", i1, i2, npairs * pp, pp))

    total = 0.0
    for ch in chans:
        total += ch.total
    rates = DemeRates(tuple(chans), total, (qp[INF1], qp[INF2]), (qm[INF1], qm[INF2]),
                      (A[INF1], A[INF2]))
    if eps is not None:
        high_density_guard_check(state, site, p, t, eps, rates=rates)
    return rates


# ---------------------------------------------------------------- events


class CouplingEvent(NamedTuple):
    kind: str
    site: int
    i1: int = 0
    i2: int = 0
    particle: int | None = None   # acting tracked particle (mover, parent, victim, ...)
    k: int = -1                   # type of the acting or affected class-0 particle
    offspring: int | None = None  # offspring type, None when deleted or not a birth
    target: int | None = None     # destination site, or the particle chosen for replacement
    susceptible_mover: bool = False


def _pick_count(hist: dict, weights, u: float):
    """Key chosen with probability proportional to ``weights(k) * hist[k]``."""
    acc = 0.0
    last = None
    for k in sorted(hist):
        w = weights(k) * hist[k]
        if w <= 0.0:
            continue
        acc += w
        last = k
        if u < acc:
            return k
    return last


def _offspring(k: int, mu: float, K: int, stream: Stream) -> int | None:
    if stream.uniform() < mu:
        return None if k + 1 > K else k + 1
    return k


def draw_event(state: CouplingState, site: int, rates: DemeRates, p: ModelParams,
               t: TruncationParams, stream: Stream, s_table: Sequence[float]) -> CouplingEvent:
    """Pick a channel by rate and resolve all random choices of the event."""
    d = state.demes[site]
    K = t.K_n
    mu = float(p.mu)
    u = stream.uniform() * rates.total
    chosen = None
    for ch in rates.channels:
        if ch.total <= 0.0:
            continue
        chosen = ch
        if u < ch.total:
            break
        u -= ch.total
    ch = chosen
    kind = ch.kind

    if kind == "migrate":
        I = t.half_width(p.L)
        left_ok, right_ok = site > -I, site < I
        go_left = stream.uniform() < 0.5 if (left_ok and right_ok) else left_ok
        dst = site - 1 if go_left else site + 1
        movers = d.n0 + len(d.ids[INF1]) + len(d.ids[INF2]) + len(d.ids[REC1])
        v = stream.uniform() * movers
        if v < d.n0:
            k = _pick_count(d.c0, lambda _k: 1.0, v)
            return CouplingEvent(kind, site, k=k, target=dst, susceptible_mover=True)
        v -= d.n0
        pool = d.ids[INF1] + d.ids[INF2] + d.ids[REC1]
        pid = pool[min(int(v), len(pool) - 1)]
        return CouplingEvent(kind, site, particle=pid, k=state.particles[pid].k, target=dst)

    if kind == "birth_infected":
        i = ch.i1
        pool = d.ids[i] + d.ids[STAR[i]]
        weights = [s_table[state.particles[q].k] if state.particles[q].k <= K else 0.0
                   for q in pool]
        v = stream.uniform() * sum(weights)
        acc = 0.0
        pid = pool[-1]
        for q, w in zip(pool, weights):
            if w <= 0.0:
                continue
            acc += w
            pid = q
            if v < acc:
                break
        k = state.particles[pid].k
        return CouplingEvent(kind, site, i, 0, pid, k, _offspring(k, mu, K, stream))

    if kind == "birth_min" or kind == "induce":
        w = lambda k: s_table[k] if k <= K else 0.0
        total = sum(w(k) * c for k, c in d.c0.items())
        k = _pick_count(d.c0, w, stream.uniform() * total)
        pid = None
        if kind == "induce":
            lst = d.ids[ch.i1]
            pid = lst[stream.index(len(lst))]
        return CouplingEvent(kind, site, ch.i1, ch.i2, pid, k, _offspring(k, mu, K, stream))

    if kind == "death_infected":
        lst = d.ids[ch.i1]
        pid = lst[stream.index(len(lst))]
        return CouplingEvent(kind, site, ch.i1, 0, pid, state.particles[pid].k)

    if kind == "death_min":
        k = _pick_count(d.c0, lambda _k: 1.0, stream.uniform() * d.n0)
        return CouplingEvent(kind, site, k=k)

    if kind == "transmit":
        lst = d.ids[ch.i1]
        pid = lst[stream.index(len(lst))]
        k = _pick_count(d.c0, lambda _k: 1.0, stream.uniform() * d.n0)
        return CouplingEvent(kind, site, ch.i1, ch.i2, pid, k)

    if kind == "pair_death":
        lst = d.ids[REC1]
        pid = lst[stream.index(len(lst))]
        return CouplingEvent(kind, site, particle=pid, k=state.particles[pid].k)

    if kind == "partial":
        lst = d.ids[STAR[ch.i2]]
        pid = lst[stream.index(len(lst))]
        target = None
        if ch.i1 == ch.i2:
            pool = d.ids[ch.i2]
            target = pool[stream.index(len(pool))]
        return CouplingEvent(kind, site, ch.i1, ch.i2, pid, state.particles[pid].k,
                             target=target)

    raise AssertionError(kind)


def apply_coupling_event(state: CouplingState, ev: CouplingEvent) -> tuple[int, ...]:
    """Apply a resolved event; returns the sites whose contents changed."""
    site = ev.site
    kind = ev.kind

    if kind == "migrate":
        if ev.susceptible_mover:
            state.add_susceptible(site, ev.k, -1)
            state.add_susceptible(ev.target, ev.k, +1)
        else:
            q = state.particles[ev.particle]
            state.move(ev.particle, ev.target)
            if q.dual is not None:
                state.move(q.dual, ev.target)
        return (site, ev.target)

    if kind == "birth_infected":
        if ev.offspring is not None:
            parent = state.particles[ev.particle]
            label = state.child_label(parent)
            cls = INF1 if parent.cls in (INF1, REC1) else INF2
            state.new_particle(cls, site, ev.offspring, label, parent)
        return (site,)

    if kind == "birth_min":
        if ev.offspring is not None:
            state.add_susceptible(site, ev.offspring, +1)
        return (site,)

    if kind == "induce":
        if ev.offspring is not None:
            parent = state.particles[ev.particle]
            label = state.child_label(parent)
            state.new_particle(ev.i2, site, ev.offspring, label, parent)
        return (site,)

    if kind == "death_infected":
        state.remove(ev.particle)
        return (site,)

    if kind == "death_min":
        state.add_susceptible(site, ev.k, -1)
        return (site,)

    if kind == "transmit":
        state.add_susceptible(site, ev.k, -1)
        parent = state.particles[ev.particle]
        label = state.child_label(parent)
        if ev.i1 != ev.i2:
            state.new_particle(3 - ev.i2, site, ev.k, label, parent)
        else:
            new = state.new_particle(STAR[3 - ev.i2], site, ev.k, label, parent)
            state.set_class(ev.particle, STAR[ev.i1])
            state.particles[ev.particle].dual = new
            state.particles[new].dual = ev.particle
        return (site,)

    if kind == "pair_death":
        dual = state.particles[ev.particle].dual
        state.remove(ev.particle)
        state.remove(dual)
        return (site,)

    if kind == "partial":
        dual = state.particles[ev.particle].dual
        state.remove(ev.particle)
        other = state.particles[dual]
        if ev.i1 != ev.i2:
            other.dual = None
            state.set_class(dual, 3 - ev.i2)
            other.reinfections += 1
            state.n_reinfections += 1
        else:
            state.set_class(ev.target, STAR[ev.i2])
            state.particles[ev.target].dual = dual
            other.dual = ev.target
        return (site,)

    raise AssertionError(kind)


# ---------------------------------------------------------------- U_eps and guard


def _real_roots(coeffs: Sequence[float]) -> list[float]:
    d = poly_degree(coeffs)
    if d <= 0:
        return []
    r = np.roots([float(c) for c in reversed(coeffs[: d + 1])])
    return sorted(float(z.real) for z in r if abs(z.imag) < 1e-9 * max(1.0, abs(z)))


def _nonneg_on_ray(coeffs: Sequence[float], start: float) -> bool:
    """``poly >= 0`` on ``[start, inf)``, checked at ``start`` and between real roots."""
    if poly_degree(coeffs) < 0:
        return True
    pts = [start] + [r for r in _real_roots(coeffs) if r > start]
    probes = [start]
    for a, b in zip(pts, pts[1:]):
        probes.append((a + b) / 2)
    probes.append(pts[-1] + 1.0)
    scale = max(1.0, max(abs(float(c)) for c in coeffs))
    return all(poly_eval(coeffs, float(x)) >= -1e-12 * scale * max(1.0, abs(x)) ** len(coeffs)
               for x in probes)


def _max_on_interval(coeffs: Sequence[float], hi: float) -> float:
    pts = [0.0, hi] + [r for r in _real_roots(poly_deriv(coeffs)) if 0.0 < r < hi]
    return max(poly_eval(coeffs, float(x)) for x in pts)


def U_eps_conditions(p: ModelParams, eps: float, U: float) -> tuple[bool, bool, bool]:
    qp = [float(c) for c in p.q_plus]
    qm = [float(c) for c in p.q_minus]
    dqp = list(poly_deriv(qp))
    cond1 = all(_nonneg_on_ray(f, U) for f in
                (qp, qm, dqp, dqp, list(poly_deriv(qm)), list(poly_deriv(dqp))))
    tol = 1e-12
    cond2 = (_max_on_interval(qp, U) <= poly_eval(qp, U) + tol * max(1.0, abs(poly_eval(qp, U)))
             and _max_on_interval(qm, U) <= poly_eval(qm, U) + tol * max(1.0, abs(poly_eval(qm, U)))
             and (not dqp or _max_on_interval(dqp, U)
                  <= poly_eval(dqp, U) + tol * max(1.0, abs(poly_eval(dqp, U)))))
    # q_+ + v q_+' - eps q_- <= 0 on [U, inf)
    n = max(len(qp), len(qm)) + 1
    g = [0.0] * n
    for i, c in enumerate(qp):
        g[i] -= c
    for i, c in enumerate(dqp):
        g[i + 1] -= c
    for i, c in enumerate(qm):
        g[i] += eps * c
    cond3 = _nonneg_on_ray(g, U)
    return cond1, cond2, cond3


def compute_U_eps(p: ModelParams, eps: float, step: float = 1.0,
                  max_steps: int = 10_000_000) -> float:
    """Smallest grid value ``U = 1 + j * step`` (``j >= 1``) meeting all three
    high-density conditions."""
    if poly_degree(p.q_plus) >= poly_degree(p.q_minus):
        raise NoSuchU("deg q_plus must be below deg q_minus")
    if not eps > 0:
        raise PreconditionViolated("eps must be positive")
    for j in range(1, max_steps + 1):
        U = round(1.0 + j * step, 12)
        if all(U_eps_conditions(p, eps, U)):
            return U
    raise NoSuchU(f"no grid value up to {1 + max_steps * step}")


@dataclass(frozen=True)
class GuardReport:
    applicable: bool
    cross_rates: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)  # i -> (birth-or-induce ratio, birth-only ratio)
    ok: bool = True


def high_density_guard_check(state: CouplingState, site: int, p: ModelParams,
                             t: TruncationParams, eps: float, U_eps: float | None = None,
                             rates: DemeRates | None = None, raise_on_fail: bool = True
                             ) -> GuardReport:
    """Check cross-class rates and birth/death ratios at a crowded deme."""
    if U_eps is None:
        U_eps = _cached_U(p, eps)
    d = state.demes.get(site) or Deme()
    n = {i: d.marginal_total(i) for i in (INF1, INF2)}
    if max(n.values()) < p.N * U_eps:
        return GuardReport(False)
    if rates is None:
        rates = coupling_rates(state, site, p, t)
    cross = {}
    for j in (INF1, INF2):
        cross[("transmit", j, 3 - j)] = rates.get("transmit", j, 3 - j).total
        cross[("partial", j, 3 - j)] = rates.get("partial", j, 3 - j).total
        cross[("induce", j, 3 - j)] = rates.get("induce", j, 3 - j).total
    ok = all(v == 0.0 for v in cross.values())
    ratios = {}
    s_max = 1.0  # s_0 = 1 bounds every s_k, so this is the worst type
    for i in (INF1, INF2):
        if n[i] < p.N * U_eps:
            continue
        b_inf = s_max * rates.q_plus[i - 1]
        b_ind = rates.get("induce", i, i).per_particle
        d_inf = rates.q_minus[i - 1]
        d_tr = rates.get("transmit", i, i).per_particle
        d_min = min(rates.q_minus)
        d_par = rates.get("partial", i, i).per_particle
        r1 = (b_inf + b_ind) / (b_inf + b_ind + d_inf + d_tr) if b_inf + b_ind > 0 else 0.0
        r2 = b_inf / (b_inf + d_min + d_par) if b_inf > 0 else 0.0
        ratios[i] = (r1, r2)
        ok = ok and r1 <= eps and r2 <= eps
    report = GuardReport(True, cross, ratios, ok)
    if not ok and raise_on_fail:
        raise GuardViolation(f"high-density guard failed at site {site}: {report}")
    return report


_U_CACHE: dict = {}


def _cached_U(p: ModelParams, eps: float) -> float:
    key = (p.q_plus, p.q_minus, eps)
    if key not in _U_CACHE:
        _U_CACHE[key] = compute_U_eps(p, eps)
    return _U_CACHE[key]


# ---------------------------------------------------------------- simulation


@dataclass
class SpreadRow:
    replicate: int
    seed: int
    hit: bool
    first_hit_time: float  # nan when no hit
    max_J: int
    total_R: int
    final_diff_mass: int


@dataclass
class CouplingRun:
    marginals: tuple          # (Trajectory, Trajectory), replayable with engine.replay
    state: CouplingState
    report: SpreadRow
    events: list              # (time, CouplingEvent)
    guard_checks: int = 0


def _diff_records(before: dict, after: dict, time: float, ev: CouplingEvent) -> list:
    """Marginal event records implied by per-site histogram changes."""
    changes = []
    for site in before:
        b, a = before[site], after[site]
        for k in set(b) | set(a):
            delta = a.get(k, 0) - b.get(k, 0)
            if delta:
                changes.append((site, k, delta))
    if not changes:
        return []
    if len(changes) == 1:
        site, k, delta = changes[0]
        tot = sum(after[site].values())
        if delta == 1:
            mutated = ev.offspring is not None and ev.offspring != ev.k
            return [EventRecord(time, site, BIRTH, k, mutated, (tot,))]
        if delta == -1:
            return [EventRecord(time, site, DEATH, k, False, (tot,))]
    if len(changes) == 2 and ev.kind == "migrate":
        (s1, k1, d1), (s2, k2, d2) = sorted(changes, key=lambda c: c[2])
        src, dst = s1, s2
        kind = MIGRATE_LEFT if dst == src - 1 else MIGRATE_RIGHT
        return [EventRecord(time, src, kind, k1, False,
                            (sum(after[src].values()), sum(after[dst].values())))]
    raise InvariantBroken(f"unexpected marginal change {changes} for {ev}")


class CouplingSimulator(_Loop):
    def __init__(self, state: CouplingState, p: ModelParams, t: TruncationParams,
                 horizon: float, stream: Stream, eps: float | None = 0.1, r: float = 1.0,
                 observe: Sequence[float] = (), cap: int = 10_000_000,
                 record: bool = True, check: bool = True):
        self.I = t.half_width(p.L)
        D = 2 * self.I + 1
        super().__init__(D, stream, horizon, observe, cap)
        self.state, self.p, self.t = state, p, t
        self.eps = eps
        self.U = _cached_U(p, eps) if eps is not None else None
        self.s = p.fitness_table(t.K_n + 1)
        self.r = r
        self.record = record
        self.check = check
        self.events: list = []
        self.marginal_events = ([], [])
        self.guard_checks = 0
        self.rates: list = [None] * D
        self.first_hit = math.nan
        for site in list(state.demes):
            if abs(site) <= self.I:
                state.check_deme(site)
        for site in state.demes:
            if self._in_window(site) and state.differs_at(site):
                self.first_hit = 0.0
                break
        for slot in range(D):
            self.refresh(slot)

    def _in_window(self, site: int) -> bool:
        return abs(site / self.p.L) <= self.r

    def slot_rate(self, slot: int) -> float:
        site = slot - self.I
        d = self.state.demes.get(site)
        if d is None or d.empty():
            self.rates[slot] = None
            return 0.0
        dirs = (slot > 0) + (slot < 2 * self.I)
        rates = coupling_rates(self.state, site, self.p, self.t, None, self.s, dirs)
        self.rates[slot] = rates
        if self.eps is not None:
            n_max = max(d.marginal_total(INF1), d.marginal_total(INF2))
            if n_max >= self.p.N * self.U:
                self.guard_checks += 1
                high_density_guard_check(self.state, site, self.p, self.t, self.eps,
                                         self.U, rates)
        return rates.total

    def fire(self, slot: int) -> tuple:
        site = slot - self.I
        ev = draw_event(self.state, site, self.rates[slot], self.p, self.t, self.stream, self.s)
        touched_sites = (site,) if ev.kind != "migrate" else (site, ev.target)
        if self.record:
            before = [{s: dict(self.state.marginal_hist(s, i)) for s in touched_sites}
                      for i in (INF1, INF2)]
        apply_coupling_event(self.state, ev)
        if self.record:
            self.events.append((self.clock, ev))
            for j, i in enumerate((INF1, INF2)):
                after = {s: dict(self.state.marginal_hist(s, i)) for s in touched_sites}
                self.marginal_events[j].extend(_diff_records(before[j], after, self.clock, ev))
        for s in touched_sites:
            if self.check:
                self.state.check_deme(s)
            if math.isnan(self.first_hit) and self._in_window(s) and self.state.differs_at(s):
                self.first_hit = self.clock
        return tuple(s + self.I for s in touched_sites)

    def snapshot(self) -> Configuration:
        return self.state.marginal(INF1)


def difference_mass_state(state: CouplingState) -> int:
    a, b = state.marginal(INF1).to_dict(), state.marginal(INF2).to_dict()
    total = 0
    for site in set(a) | set(b):
        ha, hb = a.get(site, {}), b.get(site, {})
        total += sum(abs(ha.get(k, 0) - hb.get(k, 0)) for k in set(ha) | set(hb))
    return total


def simulate_coupling(a: Configuration, b: Configuration, p: ModelParams, t: TruncationParams,
                      horizon: float, eps: float | None, seed, replicate: int = 0, r: float = 1.0,
                      record: bool = True, check: bool = True, track_labels: bool = True,
                      cap: int = 10_000_000) -> CouplingRun:
    """Exact simulation of the coupling with per-event invariant checks.

    ``seed`` is a master seed; the stream is ``seed_stream(seed, replicate)``.
    """
    key = seed_stream(seed, replicate)
    state = init_coupling(a, b, track_labels)
    sim = CouplingSimulator(state, p, t, horizon, Stream(key), eps, r, (), cap, record, check)
    sim.run()
    m1, m2 = state.marginal(INF1), state.marginal(INF2)
    trajs = (
        Trajectory("eta", a, p, t, key, float(horizon), sim.marginal_events[0], [],
                   Configuration.from_dict(m1.to_dict(), max(a.support_radius, sim.I))),
        Trajectory("eta", b, p, t, key, float(horizon), sim.marginal_events[1], [],
                   Configuration.from_dict(m2.to_dict(), max(b.support_radius, sim.I))),
    )
    hit = not math.isnan(sim.first_hit)
    row = SpreadRow(replicate, seed, hit, sim.first_hit, state.max_jumps,
                    state.n_reinfections, difference_mass_state(state))
    return CouplingRun(trajs, state, row, sim.events, sim.guard_checks)


SPREAD_COLUMNS = ("replicate", "seed", "hit", "first_hit_time", "max_J", "total_R",
                  "final_diff_mass")


def spread_csv(rows: Iterable[SpreadRow]) -> str:
    from .stats import fmt_float
    lines = [",".join(SPREAD_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r.replicate), str(r.seed), str(int(r.hit)),
                               fmt_float(r.first_hit_time), str(r.max_J), str(r.total_R),
                               str(r.final_diff_mass)]))
    return "\n".join(lines) + "\n"
