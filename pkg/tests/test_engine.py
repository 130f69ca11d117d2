import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import apply_record, domination_violations, exterior
from oracles import birth_death_law, single_deme_mean
from ratchet.duality import rw_kernel
from ratchet.engine import (
    BIRTH,
    DEATH,
    MIGRATE_LEFT,
    MIGRATE_RIGHT,
    EtaSimulator,
    SumTree,
    ZetaSimulator,
    dump_trajectory,
    load_trajectory,
    replay,
    simulate_domination_pair,
    simulate_eta_n,
    simulate_zeta,
    state_at,
    zeta_counts_from,
)
from ratchet.errors import HorizonOverflow, NonMonotoneDeath, SnapshotMismatch
from ratchet.model import Configuration, Geometric, ModelParams, TruncationParams, fisher_kpp
from ratchet.rng import Stream


def model(q_plus=(1,), q_minus=(0, 1), m=1.0, N=1, mu=0.1, s=0.1, L=1.0):
    return ModelParams(L=L, m=m, N=N, mu=mu, fitness=Geometric(s), q_plus=q_plus,
                       q_minus=q_minus)


class TestSumTree:
    def test_find_and_totals(self):
        t = SumTree(5)
        for i, v in enumerate([1.0, 0.0, 2.0, 0.5, 0.0]):
            t.set(i, v)
        assert t.total() == 3.5
        assert [t.find(u) for u in (0.0, 0.99, 1.0, 2.99, 3.0, 3.49)] == [0, 0, 2, 2, 3, 3]
        assert t.check()

    def test_zero_leaves_never_chosen(self):
        t = SumTree(4)
        t.set(0, 1.0)
        assert t.find(1.0) == 0  # u at the very top edge stays on a positive leaf


def test_empty_init():
    tr = simulate_eta_n(Configuration.empty(), fisher_kpp(), TruncationParams(3, 2), 5.0, 1)
    assert tr.events == [] and tr.final == Configuration.from_dict({}, 3)
    assert replay(tr) == tr.final


@pytest.mark.parametrize("seed", range(5))
def test_pure_migration_conserves_mass(seed):
    p = model(q_plus=(), q_minus=())
    init = Configuration.from_dict({0: {0: 3, 2: 1}, 2: {1: 2}})
    tr = simulate_eta_n(init, p, TruncationParams(3, 4), 3.0, seed)
    assert tr.events and all(r.kind in (MIGRATE_LEFT, MIGRATE_RIGHT) for r in tr.events)
    d = init.to_dict()
    for rec in tr.events:
        apply_record(d, rec)
        assert sum(sum(h.values()) for h in d.values()) == init.mass()


def test_extinction_time_is_unit_exponential():
    p = model(q_plus=(), q_minus=(0, 1), m=0.0)
    init = Configuration.from_dict({0: {0: 1}})
    t = TruncationParams(1, 0)
    times = []
    for r in range(10_000):
        tr = simulate_eta_n(init, p, t, 1e9, (11, r))
        assert len(tr.events) == 1 and tr.events[0].kind == DEATH
        times.append(tr.events[0].time)
    a = np.array(times)
    assert abs(a.mean() - 1.0) <= 3 * a.std(ddof=1) / math.sqrt(len(a))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from([(1,), (1, 2)]))
def test_cache_coherent_after_every_event(seed, q_plus):
    q_minus = (0, 1) if len(q_plus) == 1 else (0, 1, 2)
    p = model(q_plus=q_plus, q_minus=q_minus, mu=0.3)
    init = Configuration.from_dict({-1: {0: 2}, 0: {0: 1, 1: 2}, 2: {3: 1}})
    sim = EtaSimulator(init, p, TruncationParams(2, 3), 1.0, Stream(seed))
    seen = []
    sim.on_event = lambda s: seen.append(s.cache_coherent())
    sim.run()
    assert all(seen)


@pytest.mark.parametrize("seed", range(20))
def test_frozen_exterior_and_cutoff(seed):
    p = model(mu=0.5)
    init = Configuration.from_dict({-4: {0: 2}, -1: {0: 3}, 0: {1: 2}, 1: {0: 1}, 3: {5: 1}})
    t = TruncationParams(1.5, 2)
    tr = simulate_eta_n(init, p, t, 2.0, (seed, 0))
    I = t.half_width(p.L)
    assert exterior(tr.final.to_dict(), I) == exterior(init.to_dict(), I)
    for rec in tr.events:
        assert abs(rec.deme) <= I
        if rec.kind == BIRTH:
            assert rec.k <= t.K_n
        if rec.kind == MIGRATE_LEFT:
            assert rec.deme - 1 >= -I
        if rec.kind == MIGRATE_RIGHT:
            assert rec.deme + 1 <= I


def test_event_times_increase():
    tr = simulate_eta_n(Configuration.uniform(3, 2), fisher_kpp(), TruncationParams(2, 3), 3.0, 4)
    times = [r.time for r in tr.events]
    assert all(a < b for a, b in zip(times, times[1:]))
    assert all(0 < x <= 3.0 for x in times)


def test_horizon_overflow():
    with pytest.raises(HorizonOverflow):
        simulate_eta_n(Configuration.uniform(5, 2), model(q_plus=(), q_minus=()),
                       TruncationParams(2, 3), 100.0, 1, cap=50)


class TestZeta:
    def test_cutoff_kills_births(self):
        p = fisher_kpp(N=2)
        sim = ZetaSimulator({0: 2 * 3 + 1, 1: 2 * 3}, p, TruncationParams(1, 0), 1.0, Stream(0),
                            kappa=3)
        assert sim.compute_slot(1)[0] == 0.0   # site 0 is over the cap
        assert sim.compute_slot(2)[0] > 0.0    # site 1 sits exactly at the cap

    def test_initial_counts_from_eta(self):
        c = Configuration.from_dict({2: {0: 1, 4: 2}})
        assert zeta_counts_from(c) == {2: 3}
        tr = simulate_zeta(c, fisher_kpp(), TruncationParams(3, 1), 0.0, 0)
        assert tr.final.totals() == {2: 3}

    @pytest.mark.parametrize("seed", range(10))
    def test_no_birth_above_cap(self, seed):
        p = fisher_kpp()
        t = TruncationParams(2, 0, kappa=2)
        tr = simulate_zeta({-1: 4, 0: 1, 2: 3}, p, t, 2.0, seed)
        for rec in tr.events:
            if rec.kind == BIRTH:
                assert rec.totals[0] - 1 <= p.N * t.kappa
        replay(tr)

    def test_transient_mean_matches_chain(self):
        # one deme, m = 0: birth rate n, death rate n^2 (0 is absorbing)
        p = model(m=0.0)
        T = 3.0
        law = birth_death_law(lambda n: n, lambda n: n * n, 2, [T])[0]
        exact = float(np.arange(len(law)) @ law)
        vals = []
        for r in range(10_000):
            tr = simulate_zeta({0: 2}, p, TruncationParams(0.5, 0), T, (5, r), record=False)
            vals.append(tr.final.total(0))
        a = np.array(vals, dtype=float)
        assert abs(a.mean() - exact) <= 3 * a.std(ddof=1) / math.sqrt(len(a))


class TestDomination:
    def test_empty(self):
        pair = simulate_domination_pair(Configuration.empty(), fisher_kpp(), TruncationParams(2, 3),
                                        2.0, 0)
        assert pair.eta.events == [] and pair.zeta.events == []

    @pytest.mark.parametrize("seed", range(10))
    def test_unit_fitness_gives_equality(self, seed):
        p = ModelParams(L=1, m=1, N=1, mu=0.4, fitness=Geometric(0), q_plus=(1,), q_minus=(0, 1))
        init = Configuration.from_dict({0: {0: 2}, 1: {0: 1}})
        t = TruncationParams(2, 50)
        pair = simulate_domination_pair(init, p, t, 2.0, seed)
        # every event hits both processes; compare totals after each
        assert len(pair.eta.events) == len(pair.zeta.events)
        for re, rz in zip(pair.eta.events, pair.zeta.events):
            assert re.time == rz.time and re.kind == rz.kind and re.deme == rz.deme
            assert re.totals == rz.totals

    @pytest.mark.parametrize("seed", range(30))
    def test_pathwise_domination(self, seed):
        p = fisher_kpp(mu=0.3, s=0.3)
        init = Configuration.from_dict({-2: {0: 1}, 0: {0: 2, 1: 1}, 1: {2: 1}})
        pair = simulate_domination_pair(init, p, TruncationParams(2, 2), 2.0, (seed, 3))
        assert domination_violations(pair) == 0
        assert replay(pair.eta) == pair.eta.final
        assert replay(pair.zeta) == pair.zeta.final

    @pytest.mark.parametrize("seed", range(5))
    def test_nonlinear_death_domination(self, seed):
        # q_minus non-decreasing but nonlinear; exercises partner-only deaths
        p = ModelParams(L=1, m=1, N=2, mu=0.2, fitness=Geometric(0.5), q_plus=(1, 1),
                        q_minus=(0, 1, 1))
        init = Configuration.from_dict({0: {0: 3}, 1: {1: 2}})
        pair = simulate_domination_pair(init, p, TruncationParams(1, 3), 1.0, seed)
        assert domination_violations(pair) == 0

    def test_marginal_means_match_direct_runs(self):
        p = ModelParams(L=1, m=1, N=2, mu=0.2, fitness=Geometric(0.5), q_plus=(1, 1),
                        q_minus=(0, 1, 1))
        init = Configuration.from_dict({0: {0: 3}, 1: {1: 2}})
        t = TruncationParams(1, 3)
        n = 2000
        pe, pz, de, dz = [], [], [], []
        for r in range(n):
            pair = simulate_domination_pair(init, p, t, 1.0, (1, r), record=False)
            pe.append(pair.eta.final.mass())
            pz.append(pair.zeta.final.mass())
            de.append(simulate_eta_n(init, p, t, 1.0, (2, r), record=False).final.mass())
            dz.append(simulate_zeta(init, p, t, 1.0, (3, r), record=False).final.mass())
        for a, b in ((pe, de), (pz, dz)):
            a, b = np.array(a, float), np.array(b, float)
            se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(n)
            assert abs(a.mean() - b.mean()) <= 3 * se

    def test_non_monotone_death_dominates_in_mean(self):
        # q_minus(v) = v (v - 2)^2 decreases on (2/3, 2): no pathwise pairing,
        # so compare per-site means of independent runs instead
        p = model(q_plus=(1,), q_minus=(0, 4, -4, 1), mu=0.3, s=0.3)
        init = Configuration.from_dict({0: {0: 2}, 1: {1: 1}})
        t = TruncationParams(1, 3)
        n = 2000
        eta = [simulate_eta_n(init, p, t, 1.0, (7, r), record=False).final.totals() for r in range(n)]
        zeta = [simulate_zeta(init, p, t, 1.0, (8, r), record=False).final.totals() for r in range(n)]
        for x in t.sites(p.L):
            a = np.array([d.get(x, 0) for d in eta], float)
            b = np.array([d.get(x, 0) for d in zeta], float)
            se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(n)
            assert b.mean() - a.mean() >= -3 * se

    def test_non_monotone_death_refused(self):
        p = model(q_plus=(1,), q_minus=(1, -1, 1))
        with pytest.raises(NonMonotoneDeath):
            simulate_domination_pair(Configuration.uniform(1, 0), p, TruncationParams(1, 1), 1.0, 0)


class TestReplay:
    def test_roundtrip_and_snapshots(self):
        init = Configuration.from_dict({-1: {0: 2}, 0: {1: 1}, 5: {0: 1}})
        tr = simulate_eta_n(init, fisher_kpp(mu=0.4), TruncationParams(2, 3), 2.0, 9,
                            observe=[0.0, 0.5, 1.0, 2.0])
        assert len(tr.snapshots) == 4
        assert replay(tr) == tr.final
        blob = dump_trajectory(tr)
        back = load_trajectory(blob)
        assert dump_trajectory(back) == blob
        assert replay(back) == tr.final
        for time, snap in tr.snapshots:
            assert state_at(tr, time).to_dict() == snap.to_dict()

    def test_empty_trajectory_replays_to_init(self):
        init = Configuration.from_dict({0: {0: 1}})
        tr = simulate_eta_n(init, fisher_kpp(), TruncationParams(1, 1), 0.0, 0)
        assert tr.events == [] and replay(tr).to_dict() == init.to_dict()

    def test_tampered_snapshot_detected(self):
        tr = simulate_eta_n(Configuration.uniform(2, 1), fisher_kpp(), TruncationParams(1, 1), 1.0,
                            3, observe=[0.5])
        tr.snapshots[0] = (0.5, Configuration.from_dict({0: {0: 99}}, 1))
        with pytest.raises(SnapshotMismatch):
            replay(tr)

    def test_tampered_event_detected(self):
        tr = simulate_eta_n(Configuration.uniform(2, 1), fisher_kpp(), TruncationParams(1, 1), 1.0, 3)
        rec = tr.events[0]
        tr.events[0] = rec._replace(totals=tuple(x + 1 for x in rec.totals))
        with pytest.raises(SnapshotMismatch):
            replay(tr)

    def test_same_seed_same_bytes(self):
        args = (Configuration.uniform(2, 2), fisher_kpp(), TruncationParams(2, 3), 2.0, (42, 7))
        assert dump_trajectory(simulate_eta_n(*args)) == dump_trajectory(simulate_eta_n(*args))
        other = simulate_eta_n(*args[:4], (42, 8))
        assert dump_trajectory(other) != dump_trajectory(simulate_eta_n(*args))


def test_pure_migration_matches_kernel():
    p = model(q_plus=(), q_minus=(), m=1.0)
    t = TruncationParams(2, 0)
    init = Configuration.from_dict({0: {0: 5}})
    T = 1.0
    n = 2000
    counts = {x: 0 for x in t.sites(1)}
    for r in range(n):
        tr = simulate_eta_n(init, p, t, T, (21, r), record=False)
        for x, c in tr.final.totals().items():
            counts[x] += c
    K = rw_kernel(p, t, T)
    for x in t.sites(1):
        P = K.prob(0, x)
        se = math.sqrt(5 * P * (1 - P) / n)
        assert abs(counts[x] / n - 5 * P) <= 3 * se


def test_single_deme_mean_matches_master_equation():
    p = model(m=0.0, mu=0.3, s=0.4)
    t = TruncationParams(0.5, 1)
    times = [0.5, 1.0]
    exact = single_deme_mean(p.q_plus, p.q_minus, p.fitness_table(1), p.mu, 1, 1, (2, 0), times, 40)
    vals = {x: [] for x in times}
    for r in range(4000):
        tr = simulate_eta_n(Configuration.from_dict({0: {0: 2}}), p, t, 1.0, (3, r),
                            observe=times, record=False)
        for time, snap in tr.snapshots:
            vals[time].append(snap.total(0))
    for x, e in zip(times, exact):
        a = np.array(vals[x], dtype=float)
        assert abs(a.mean() - e) <= 3 * a.std(ddof=1) / math.sqrt(len(a))
