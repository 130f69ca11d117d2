"""Duality toolkit: scaled falling factorials, the product duality function,
reflected random-walk kernels, correlation and Green's-function estimators,
and Chernoff-type tail bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import EtaSimulator, simulate_zeta
from .errors import PreconditionViolated, SizeLimit
from .model import Configuration, ModelParams, TruncationParams
from .rates import deme_rate_vector
from .rng import Stream, seed_stream

MAX_KERNEL_SITES = 2000


def poisson_poly(N: int, j: int, i: int) -> Fraction:
    """Scaled falling factorial ``i (i-1) ... (i-j+1) / N^j``; 1 if ``j <= 0`` or ``i < 0``."""
    if j <= 0 or i < 0:
        return Fraction(1)
    num = 1
    for r in range(j):
        num *= i - r
        if num == 0:
            return Fraction(0)
    return Fraction(num, N ** j)


def duality_fn(xi: Mapping[int, int], zeta: Mapping[int, int], N: int,
               sites: Iterable[int] | None = None) -> Fraction:
    """Product over sites of ``poisson_poly(N, xi(x), zeta(x))``."""
    if sites is None:
        sites = set(xi) | set(zeta)
    out = Fraction(1)
    for x in sites:
        j = xi.get(x, 0)
        if j:
            out *= poisson_poly(N, j, zeta.get(x, 0))
            if not out:
                return out
    return out


def _moves(conf: Mapping[int, int], sites: Sequence[int]):
    """Single-particle reflected moves: ``(multiplicity, new configuration)``."""
    lo, hi = min(sites), max(sites)
    for x, c in conf.items():
        if not c:
            continue
        for y in (x - 1, x + 1):
            if lo <= y <= hi:
                new = dict(conf)
                new[x] = c - 1
                new[y] = new.get(y, 0) + 1
                yield c, new


def migration_generator_apply(side: str, xi: Mapping[int, int], zeta: Mapping[int, int],
                              p: ModelParams, t: TruncationParams) -> Fraction:
    """``(m/2)`` times the reflected migration generator applied to the duality
    function in the first (``xi``) or second (``zeta``) argument, by explicit
    enumeration of single-particle jumps."""
    sites = list(t.sites(p.L))
    m_half = Fraction(p.m) / 2
    base = duality_fn(xi, zeta, p.N, sites)
    acc = Fraction(0)
    if side == "first":
        for c, new in _moves(xi, sites):
            acc += c * (duality_fn(new, zeta, p.N, sites) - base)
    elif side == "second":
        for c, new in _moves(zeta, sites):
            acc += c * (duality_fn(xi, new, p.N, sites) - base)
    else:
        raise ValueError("side must be 'first' or 'second'")
    return m_half * acc


# ------------------------------------------------------------------ kernels


def expm_taylor(A: np.ndarray, order: int = 18) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a truncated Taylor series."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    norm = np.linalg.norm(A, 1)
    squarings = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    B = A / (2 ** squarings)
    term = np.eye(n)
    out = np.eye(n)
    for k in range(1, order + 1):
        term = term @ B / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


@dataclass(frozen=True)
class RwKernel:
    sites: tuple
    generator: np.ndarray
    P: np.ndarray
    time: float

    def prob(self, x: int, y: int) -> float:
        """Transition probability from site ``x`` to site ``y``; identity off the box."""
        lo = self.sites[0]
        n = len(self.sites)
        xi, yi = x - lo, y - lo
        if 0 <= xi < n and 0 <= yi < n:
            return float(self.P[xi, yi])
        return 1.0 if x == y else 0.0


def rw_generator(m: float, n_sites: int) -> np.ndarray:
    Q = np.zeros((n_sites, n_sites))
    for i in range(n_sites):
        for j in (i - 1, i + 1):
            if 0 <= j < n_sites:
                Q[i, j] = m / 2
                Q[i, i] -= m / 2
    return Q


def rw_kernel(p: ModelParams, t: TruncationParams, time: float) -> RwKernel:
    """Transition matrix of the rate-``m`` walk with suppressed out-jumps."""
    if time < 0:
        raise PreconditionViolated("time must be non-negative")
    sites = tuple(t.sites(p.L))
    if len(sites) > MAX_KERNEL_SITES:
        raise SizeLimit(f"{len(sites)} sites exceed the dense limit {MAX_KERNEL_SITES}")
    Q = rw_generator(float(p.m), len(sites))
    return RwKernel(sites, Q, expm_taylor(Q * time), float(time))


# ------------------------------------------------------------------ estimators


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int


def mean_se(values: Sequence[float]) -> Estimate:
    a = np.asarray(values, dtype=float)
    n = len(a)
    if n < 2:
        return Estimate(float(a.mean()) if n else 0.0, float("nan"), n)
    return Estimate(float(a.mean()), float(a.std(ddof=1) / math.sqrt(n)), n)


def correlation_mc(init: Configuration, xi: Mapping[int, int], p: ModelParams,
                   t: TruncationParams, kappa: int | None, time: float,
                   replicates: int, seed: int) -> Estimate:
    """Monte Carlo mean and SE of the duality function against the capped process."""
    if replicates < 2:
        raise PreconditionViolated("need at least two replicates")
    values = correlation_samples(init, [xi], p, t, kappa, time, replicates, seed)[0]
    return mean_se(values)


def correlation_samples(init: Configuration, xis: Sequence[Mapping[int, int]],
                        p: ModelParams, t: TruncationParams, kappa: int | None,
                        time: float, replicates: int, seed: int) -> list[list[float]]:
    """Per-replicate duality values for several dual configurations on shared runs."""
    out: list[list[float]] = [[] for _ in xis]
    for r in range(replicates):
        traj = simulate_zeta(init, p, t, time, (seed, r), kappa=kappa, record=False)
        z = {s: c for s, _, c in traj.final}
        for i, xi in enumerate(xis):
            out[i].append(float(duality_fn(xi, z, p.N)))
    return out


@dataclass(frozen=True)
class GreensReport:
    lhs: Estimate
    rhs: Estimate
    kernel_term: float
    z_score: float  # |lhs - rhs| / combined SE

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs.se, self.rhs.se)


def reaction_term(counts: Mapping[int, int], I: frozenset, p: ModelParams,
                  t: TruncationParams) -> float:
    """Reaction part of the generator applied to ``sum_{k in I} eta_k`` at one site."""
    rv = deme_rate_vector(counts, p, t)
    return float(sum(r for k, r in rv.births.items() if k in I)
                 - sum(r for k, r in rv.deaths.items() if k in I))


def greens_check(init: Configuration, I: Iterable[int], x: int, p: ModelParams,
                 t: TruncationParams, time: float, replicates: int, seed: int,
                 grid_points: int = 64) -> GreensReport:
    """Both sides of the Green's-function representation at site ``x``.

    The left side is the Monte Carlo mean of ``sum_{k in I} eta_k(time, x)``.
    The right side smooths the initial data with the reflected-walk kernel
    and adds the time integral of the kernel-smoothed expected reaction
    term, using trapezoid quadrature on a uniform grid of recorded states
    from the same runs.
    """
    I = frozenset(I)
    sites = list(t.sites(p.L))
    grid = np.linspace(0.0, time, grid_points)
    kern_T = rw_kernel(p, t, time)
    init_d = init.to_dict()
    kernel_term = 0.0
    for y in sites:
        kernel_term += kern_T.prob(x, y) * sum(c for k, c in init_d.get(y, {}).items() if k in I)
    if abs(x) > t.half_width(p.L):
        kernel_term = float(sum(c for k, c in init_d.get(x, {}).items() if k in I))
    kernels = [rw_kernel(p, t, time - s) for s in grid]
    weights = np.full(grid_points, grid[1] - grid[0] if grid_points > 1 else 0.0)
    weights[0] /= 2
    weights[-1] /= 2
    lhs, rhs = [], []
    inside = abs(x) <= t.half_width(p.L)
    for r in range(replicates):
        sim = EtaSimulator(init, p, t, time, Stream(seed_stream(seed, r)),
                           observe=list(grid), record=False)
        snaps = sim.run()
        final = sim.snapshot().deme(x)
        lhs.append(float(sum(c for k, c in final.items() if k in I)))
        integral = 0.0
        if inside and I:
            for j, (_, cfg) in enumerate(snaps):
                d = cfg.to_dict()
                acc = 0.0
                for y in sites:
                    h = d.get(y)
                    if h:
                        acc += kernels[j].prob(x, y) * reaction_term(h, I, p, t)
                integral += weights[j] * acc
        rhs.append(kernel_term + integral)
    L_est, R_est = mean_se(lhs), mean_se(rhs)
    comb = math.hypot(L_est.se, R_est.se)
    diff = abs(L_est.mean - R_est.mean)
    z = diff / comb if comb > 0 else (0.0 if diff == 0 else math.inf)
    return GreensReport(L_est, R_est, kernel_term, z)


# ------------------------------------------------------------------ tail bounds


def poisson_tail_bound(alpha: float, r: float) -> float:
    """Chernoff bound ``exp(r (1 - log(r / alpha)))`` on ``P(Poisson(alpha) >= r)``."""
    if not (alpha > 0 and r >= alpha):
        raise PreconditionViolated("need r >= alpha > 0")
    return math.exp(r * (1.0 - math.log(r / alpha)))


def poisson_tail_exact(alpha: float, r: float) -> float:
    """``P(Poisson(alpha) >= r)`` by summing the tail series directly."""
    j = max(math.ceil(r), 0)
    term = math.exp(-alpha + j * math.log(alpha) - math.lgamma(j + 1)) if alpha > 0 else float(j == 0)
    acc = 0.0
    while term > 0.0:
        acc += term
        j += 1
        term *= alpha / j
        if j > alpha and term < 1e-17 * acc:
            break
    return min(acc, 1.0)


def rw_tail_bound(L: float, m: float, T: float, distance: float) -> float:
    """``exp(-L * distance)``, valid once ``distance > e^2 m T / L``."""
    if not distance > math.e ** 2 * m * T / L:
        raise PreconditionViolated("distance must exceed e^2 m T / L")
    return math.exp(-L * distance)


def rw_exceedance_frequency(L: float, m: float, T: float, distance: float,
                            walks: int, seed: int, half_width: int | None = None) -> float:
    """Fraction of rate-``m`` walks on ``Z/L`` displaced by at least ``distance`` at ``T``.

    With ``half_width`` the walk lives on sites ``[-half_width, half_width]``
    started at 0 and out-jumps are suppressed.
    """
    rng = np.random.Generator(np.random.Philox(key=seed_stream(seed, 0)))
    jumps = rng.poisson(m * T, size=walks)
    pos = np.zeros(walks, dtype=np.int64)
    for step in range(int(jumps.max(initial=0))):
        active = jumps > step
        move = np.where(rng.random(walks) < 0.5, -1, 1)
        new = pos + move
        if half_width is not None:
            active &= np.abs(new) <= half_width
        pos = np.where(active, new, pos)
    return float(np.mean(np.abs(pos) / L >= distance - 1e-12))
