"""Per-deme reaction rates.

All functions are pure. They work in floating point for float parameters
and stay exact when the parameters are ``Fraction``s, which is how the
rate-bound invariant is checked without tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .model import ModelParams, Number, TruncationParams, poly_eval


def _is_exact(*values) -> bool:
    return any(isinstance(v, Fraction) for v in values)


def q_scaled(poly: Sequence[Number], N: int, u: Number) -> Number:
    """Evaluate ``poly(u / N)``."""
    if isinstance(u, int) and _is_exact(*poly):
        v = Fraction(u, N)
    else:
        v = u / N
    return poly_eval(poly, v)


def birth_rate(k: int, u: Mapping[int, int], p: ModelParams,
               K_cutoff: int | None = None) -> Number:
    """Rate at which type-``k`` offspring appear in deme ``u``."""
    if K_cutoff is not None and k > K_cutoff:
        return 0
    kept = p.s(k) * (1 - p.mu) * u.get(k, 0)
    mutated = p.s(k - 1) * p.mu * u.get(k - 1, 0) if k >= 1 else 0
    if not kept and not mutated:
        return 0
    return (kept + mutated) * q_scaled(p.q_plus, p.N, sum(u.values()))


def birth_split(k: int, u: Mapping[int, int], p: ModelParams) -> tuple[Number, Number]:
    """The faithful-copy and mutant parts of the type-``k`` birth rate."""
    q = q_scaled(p.q_plus, p.N, sum(u.values()))
    kept = p.s(k) * (1 - p.mu) * u.get(k, 0) * q
    mutated = p.s(k - 1) * p.mu * u.get(k - 1, 0) * q if k >= 1 else 0
    return kept, mutated


def death_rate(k: int, u: Mapping[int, int], p: ModelParams) -> Number:
    n = u.get(k, 0)
    if not n:
        return 0
    return n * q_scaled(p.q_minus, p.N, sum(u.values()))


def total_rate_bound(u_total: Number, p: ModelParams) -> Number:
    """``u (q_+^N(u) + q_-^N(u))``, an upper bound on a deme's reaction rate."""
    return u_total * (q_scaled(p.q_plus, p.N, u_total) + q_scaled(p.q_minus, p.N, u_total))


@dataclass(frozen=True)
class RateVector:
    births: dict = field(default_factory=dict)
    deaths: dict = field(default_factory=dict)
    total: Number = 0


def deme_rate_vector(u: Mapping[int, int], p: ModelParams,
                     t: TruncationParams | None = None) -> RateVector:
    """Reaction rates of one deme, births restricted to ``k <= K_n``.

    Entries are listed in increasing ``k``; zero rates are omitted.
    """
    occupied = sorted(k for k, c in u.items() if c)
    if not occupied:
        return RateVector({}, {}, 0)
    n = sum(u[k] for k in occupied)
    qp = q_scaled(p.q_plus, p.N, n)
    qm = q_scaled(p.q_minus, p.N, n)
    K = t.K_n if t is not None else None
    births = {}
    candidates = sorted(set(occupied) | {k + 1 for k in occupied})
    for k in candidates:
        if K is not None and k > K:
            break
        kept = p.s(k) * (1 - p.mu) * u.get(k, 0)
        mutated = p.s(k - 1) * p.mu * u.get(k - 1, 0) if k >= 1 else 0
        r = (kept + mutated) * qp
        if r:
            births[k] = r
    deaths = {}
    for k in occupied:
        r = u[k] * qm
        if r:
            deaths[k] = r
    total = 0
    for r in births.values():
        total += r
    for r in deaths.values():
        total += r
    return RateVector(births, deaths, total)
