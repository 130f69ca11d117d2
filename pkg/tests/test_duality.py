import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from oracles import birth_death_law, falling_factorial, two_site_stay_probability
from ratchet.duality import (
    correlation_mc,
    correlation_samples,
    duality_fn,
    expm_taylor,
    greens_check,
    migration_generator_apply,
    poisson_poly,
    poisson_tail_bound,
    poisson_tail_exact,
    rw_exceedance_frequency,
    rw_generator,
    rw_kernel,
    rw_tail_bound,
)
from ratchet.engine import simulate_zeta
from ratchet.errors import PreconditionViolated, SizeLimit
from ratchet.model import Configuration, Geometric, ModelParams, TruncationParams, fisher_kpp


def box(half):
    return TruncationParams(half + 1e-9, 0)


small = st.dictionaries(st.integers(-2, 2), st.integers(0, 4), max_size=5)


class TestPoissonPoly:
    def test_examples(self):
        assert poisson_poly(3, 0, 7) == 1
        assert poisson_poly(1, 2, 5) == 20
        assert poisson_poly(2, 3, 5) == Fraction(15, 2)
        assert poisson_poly(1, 3, 2) == 0
        assert poisson_poly(4, 2, -1) == 1

    @given(st.integers(1, 5), st.integers(-2, 6), st.integers(-1, 9))
    def test_against_falling_factorial(self, N, j, i):
        want = 1 if (j <= 0 or i < 0) else Fraction(falling_factorial(i, j), N ** j)
        assert poisson_poly(N, j, i) == want

    @given(st.integers(1, 5), st.integers(0, 9))
    def test_first_order_is_scaled_identity(self, N, i):
        assert poisson_poly(N, 1, i) == Fraction(i, N)


class TestDualityFunction:
    def test_examples(self):
        assert duality_fn({}, {0: 3, 1: 2}, 1) == 1
        assert duality_fn({1: 1}, {1: 3, 2: 2}, 1) == 3
        assert duality_fn({0: 3}, {0: 2}, 1) == 0

    @given(small, small, st.integers(1, 3))
    def test_power_bound(self, xi, zeta, N):
        bound = Fraction(1)
        for x, j in xi.items():
            bound *= Fraction(zeta.get(x, 0), N) ** j
        assert duality_fn(xi, zeta, N) <= bound


class TestSymmetry:
    def test_empty_dual(self):
        p = fisher_kpp()
        assert migration_generator_apply("first", {}, {0: 2}, p, box(2)) == 0
        assert migration_generator_apply("second", {}, {0: 2}, p, box(2)) == 0

    def test_hand_enumeration(self):
        # one dual and one zeta particle in the middle of a 3-site box: each
        # of the two possible moves takes the duality function from 1 to 0
        p = ModelParams(L=1, m=Fraction(3), N=1, mu=0, fitness=Geometric(1), q_plus=(1,),
                        q_minus=(0, 1))
        first = migration_generator_apply("first", {0: 1}, {0: 1}, p, box(1))
        second = migration_generator_apply("second", {0: 1}, {0: 1}, p, box(1))
        assert first == second == Fraction(3, 2) * (-2)

    def test_bad_side(self):
        with pytest.raises(ValueError):
            migration_generator_apply("third", {}, {}, fisher_kpp(), box(1))

    @settings(max_examples=200)
    @given(small, small, st.integers(1, 3), st.sampled_from([Fraction(1), Fraction(5, 2)]))
    def test_symmetric(self, xi, zeta, N, m):
        p = ModelParams(L=1, m=m, N=N, mu=0, fitness=Geometric(1), q_plus=(1,), q_minus=(0, 1))
        t = box(2)
        assert (migration_generator_apply("first", xi, zeta, p, t)
                == migration_generator_apply("second", xi, zeta, p, t))


class TestKernel:
    def test_zero_rate_is_identity(self):
        K = rw_kernel(fisher_kpp(m=0.0), box(3), 5.0)
        assert np.array_equal(K.P, np.eye(7))

    @pytest.mark.parametrize("m,t", [(1.0, 0.3), (2.0, 1.7), (0.5, 10.0)])
    def test_two_sites(self, m, t):
        P = expm_taylor(rw_generator(m, 2) * t)
        assert P[0, 0] == pytest.approx(two_site_stay_probability(m, t), abs=1e-12)

    def test_properties(self):
        p = fisher_kpp(m=1.3)
        K = rw_kernel(p, box(4), 0.7)
        assert np.allclose(K.P.sum(axis=1), 1.0, atol=1e-12)
        assert np.array_equal(K.generator, K.generator.T)
        assert np.allclose(K.P, K.P.T, atol=1e-13)
        assert np.array_equal(rw_kernel(p, box(4), 0.0).P, np.eye(9))
        Ks, Kt, Kst = rw_kernel(p, box(4), 0.3), rw_kernel(p, box(4), 0.4), K
        assert np.allclose(Ks.P @ Kt.P, Kst.P, atol=1e-10)
        assert np.allclose(K.P, expm(K.generator * 0.7), atol=1e-12)
        assert K.prob(10, 10) == 1.0 and K.prob(10, 0) == 0.0

    def test_size_limit(self):
        with pytest.raises(SizeLimit):
            rw_kernel(fisher_kpp(), TruncationParams(1000, 0), 1.0)

    def test_negative_time(self):
        with pytest.raises(PreconditionViolated):
            rw_kernel(fisher_kpp(), box(1), -1.0)


class TestCorrelation:
    def test_time_zero_is_deterministic(self):
        init = Configuration.from_dict({0: {0: 3}, 1: {2: 1}})
        est = correlation_mc(init, {0: 2}, fisher_kpp(), box(1), None, 0.0, 10, 0)
        assert est.mean == 6.0 and est.se == 0.0

    def test_needs_two_replicates(self):
        with pytest.raises(PreconditionViolated):
            correlation_mc(Configuration.empty(), {}, fisher_kpp(), box(1), None, 1.0, 1, 0)

    def test_single_dual_particle_is_scaled_mean(self):
        p = fisher_kpp(N=2)
        init = Configuration.uniform(2, 1)
        t = box(1)
        vals = correlation_samples(init, [{0: 1}], p, t, 3, 0.8, 50, 17)[0]
        direct = []
        for r in range(50):
            tr = simulate_zeta(init, p, t, 0.8, (17, r), kappa=3, record=False)
            direct.append(tr.final.total(0) / 2)
        assert vals == direct

    def test_against_chain(self):
        # single deme, m = 0, kappa = 3: second factorial moment of the chain
        p = ModelParams(L=1, m=0.0, N=1, mu=0, fitness=Geometric(1), q_plus=(1,),
                        q_minus=(0, 1))
        kappa, T = 3, 1.0
        law = birth_death_law(lambda n: n * (1 if n <= kappa else 0), lambda n: n * n, 2, [T])[0]
        exact = sum(law[n] * n * (n - 1) for n in range(len(law)))
        est = correlation_mc(Configuration.from_dict({0: {0: 2}}), {0: 2}, p, box(0), kappa, T,
                             4000, 9)
        assert abs(est.mean - exact) <= 3 * est.se


class TestGreens:
    def test_empty_index_set(self):
        rep = greens_check(Configuration.uniform(1, 1), [], 0, fisher_kpp(), box(1), 0.5, 20, 0,
                           grid_points=8)
        assert rep.lhs.mean == 0 and rep.rhs.mean == 0

    def test_pure_migration(self):
        p = ModelParams(L=1, m=1.0, N=1, mu=0.0, fitness=Geometric(1), q_plus=(), q_minus=())
        init = Configuration.from_dict({-1: {0: 3}, 1: {0: 1}})
        rep = greens_check(init, [0], 0, p, box(1), 0.8, 2000, 3, grid_points=8)
        assert rep.rhs.se < 1e-12 and rep.rhs.mean == pytest.approx(rep.kernel_term)
        assert rep.z_score <= 3

    def test_fisher_kpp_three_sites(self):
        init = Configuration.from_dict({-1: {0: 2}, 0: {0: 1, 1: 1}, 1: {0: 1}})
        rep = greens_check(init, [0], 0, fisher_kpp(mu=0.2, s=0.2), box(1), 0.5, 1000, 5,
                           grid_points=32)
        assert rep.z_score <= 3


class TestTails:
    def test_poisson_example(self):
        assert poisson_tail_bound(1, 5) == pytest.approx(math.e ** 5 / 5 ** 5, rel=1e-12)
        assert poisson_tail_exact(1, 5) == pytest.approx(0.003660, abs=5e-7)

    def test_at_threshold(self):
        assert poisson_tail_bound(2.0, 2.0) == pytest.approx(math.e ** 2)

    @given(st.floats(0.05, 20), st.floats(1, 30))
    def test_bound_dominates(self, alpha, ratio):
        r = alpha * ratio
        assert poisson_tail_exact(alpha, r) <= poisson_tail_bound(alpha, r) * (1 + 1e-12)

    def test_preconditions(self):
        with pytest.raises(PreconditionViolated):
            poisson_tail_bound(2, 1)
        with pytest.raises(PreconditionViolated):
            rw_tail_bound(1, 1, 1, 7)

    def test_rw_bound(self):
        assert rw_tail_bound(1, 1, 1, 10) == pytest.approx(4.54e-5, rel=1e-3)
        freq = rw_exceedance_frequency(1, 1, 1, 10, 100_000, 0)
        assert freq <= rw_tail_bound(1, 1, 1, 10)

    def test_rw_frequency_is_sensible(self):
        # P(|X| >= 1) for rate-1 walk at time 1 is 1 - P(X = 0) = 1 - e^{-1} I_0(1)
        from scipy.special import iv
        exact = 1 - math.exp(-1) * iv(0, 1)
        freq = rw_exceedance_frequency(1, 1, 1, 1, 100_000, 4)
        assert abs(freq - exact) <= 3 * math.sqrt(exact * (1 - exact) / 100_000)
