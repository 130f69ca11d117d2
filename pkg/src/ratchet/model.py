"""Model parameters and the lattice configuration space.

Sites are stored as integer indices ``i``; the physical position of site
``i`` is ``i / L``. All weighted norms are computed in physical
coordinates with the weight ``(1 + |x|)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    DegreeViolation,
    FitnessViolation,
    NegativePolynomial,
    ParamsInvalid,
    ParseError,
)

Number = float | int | Fraction


# ---------------------------------------------------------------- polynomials


def poly_degree(coeffs: Sequence[Number]) -> int:
    """Degree of a coefficient list (lowest degree first); -1 for zero."""
    for d in range(len(coeffs) - 1, -1, -1):
        if coeffs[d] != 0:
            return d
    return -1


def poly_eval(coeffs: Sequence[Number], v: Number) -> Number:
    """Horner evaluation; keeps exact types when given exact inputs."""
    acc: Number = 0
    for c in reversed(coeffs):
        acc = acc * v + c
    return acc


def poly_deriv(coeffs: Sequence[Number]) -> tuple:
    return tuple(i * c for i, c in enumerate(coeffs))[1:]


def _root_bound(coeffs: Sequence[Number]) -> float:
    """Cauchy bound on the modulus of the roots."""
    d = poly_degree(coeffs)
    if d <= 0:
        return 0.0
    lead = abs(float(coeffs[d]))
    return 1.0 + max(abs(float(c)) for c in coeffs[:d]) / lead


def is_nonnegative_on_halfline(coeffs: Sequence[Number], n_grid: int = 4096) -> bool:
    """Check ``poly >= 0`` on ``[0, inf)``.

    Requires a non-negative leading coefficient, then evaluates on zero
    plus a geometric grid up to the Cauchy root bound (beyond which the
    sign is that of the leading coefficient).
    """
    d = poly_degree(coeffs)
    if d < 0:
        return True
    if coeffs[d] < 0:
        return False
    if coeffs[0] < 0:
        return False
    if d == 0:
        return True
    hi = _root_bound(coeffs) * 2.0
    grid = np.geomspace(1e-9, hi, n_grid)
    vals = np.polynomial.polynomial.polyval(grid, [float(c) for c in coeffs])
    scale = np.polynomial.polynomial.polyval(grid, [abs(float(c)) for c in coeffs])
    return bool(np.all(vals >= -1e-12 * scale))


# ---------------------------------------------------------------- fitness


@dataclass(frozen=True)
class Geometric:
    """Fitness ``s_k = (1 - s)^k``."""

    s: Number

    def __call__(self, k: int) -> Number:
        return (1 - self.s) ** k


@dataclass(frozen=True)
class Explicit:
    """Fitness given as a list, zero beyond its end."""

    values: tuple

    def __init__(self, values: Iterable[Number]):
        object.__setattr__(self, "values", tuple(values))

    def __call__(self, k: int) -> Number:
        return self.values[k] if k < len(self.values) else 0


FitnessSpec = Geometric | Explicit


def _check_fitness(f: FitnessSpec) -> list[str]:
    out = []
    if isinstance(f, Geometric):
        if not (0 < f.s <= 1):
            out.append(f"fitness: geometric s={f.s} outside (0, 1]")
        return out
    vals = f.values
    if not vals or vals[0] != 1:
        out.append("fitness: s_0 must equal 1")
    if any(v < 0 for v in vals):
        out.append("fitness: negative entry")
    if any(b > a for a, b in zip(vals, vals[1:])):
        out.append("fitness: sequence increases")
    return out


# ---------------------------------------------------------------- params


@dataclass(frozen=True)
class ModelParams:
    L: Number
    m: Number
    N: int
    mu: Number
    fitness: FitnessSpec
    q_plus: tuple
    q_minus: tuple

    def __post_init__(self):
        object.__setattr__(self, "q_plus", tuple(self.q_plus))
        object.__setattr__(self, "q_minus", tuple(self.q_minus))

    def s(self, k: int) -> Number:
        return self.fitness(k)

    def fitness_table(self, kmax: int) -> list[float]:
        return [float(self.fitness(k)) for k in range(kmax + 1)]


def fisher_kpp(L: Number = 1.0, m: Number = 1.0, N: int = 1, mu: Number = 0.1,
               s: Number = 0.1) -> ModelParams:
    """Constant birth polynomial, identity death polynomial."""
    return ModelParams(L=L, m=m, N=N, mu=mu, fitness=Geometric(s),
                       q_plus=(1,), q_minus=(0, 1))


def ratchet_preset(B: Number, L: Number = 1.0, m: Number = 1.0, N: int = 1,
                   mu: Number = 0.1, s: Number = 0.1) -> ModelParams:
    """Birth ``(1-s)^k (B u + 1)``, death ``u (B u + 1)``."""
    return ModelParams(L=L, m=m, N=N, mu=mu, fitness=Geometric(s),
                       q_plus=(1, B), q_minus=(0, 1, B))


def param_violations(p: ModelParams) -> list[tuple[type, str]]:
    out: list[tuple[type, str]] = []
    if not p.L > 0:
        out.append((ParamsInvalid, f"L must be positive, got {p.L}"))
    if not p.m >= 0:
        out.append((ParamsInvalid, f"m must be non-negative, got {p.m}"))
    if not (isinstance(p.N, (int, np.integer)) and p.N >= 1):
        out.append((ParamsInvalid, f"N must be a positive integer, got {p.N}"))
    if not (0 <= p.mu <= 1):
        out.append((ParamsInvalid, f"mu must lie in [0, 1], got {p.mu}"))
    for msg in _check_fitness(p.fitness):
        out.append((FitnessViolation, msg))
    dp, dm = poly_degree(p.q_plus), poly_degree(p.q_minus)
    if not (0 <= dp < dm):
        out.append((DegreeViolation,
                    f"polynomial degrees: need 0 <= deg q_plus ({dp}) < deg q_minus ({dm})"))
    for name, c in (("q_plus", p.q_plus), ("q_minus", p.q_minus)):
        if not is_nonnegative_on_halfline(c):
            out.append((NegativePolynomial, f"{name} takes negative values on [0, inf)"))
    return out


def validate_params(p: ModelParams) -> ModelParams:
    """Return ``p`` unchanged if valid, otherwise raise.

    A single violation raises its specific error class; several raise
    ``ParamsInvalid`` carrying the full list in ``.violations``.
    """
    bad = param_violations(p)
    if not bad:
        return p
    if len(bad) == 1:
        cls, msg = bad[0]
        raise cls(msg, violations=[msg])
    msgs = [m for _, m in bad]
    raise ParamsInvalid("; ".join(msgs), violations=msgs)


# ---------------------------------------------------------------- truncation


@dataclass(frozen=True)
class TruncationParams:
    lambda_n: Number
    K_n: int
    kappa: int | None = None

    def __post_init__(self):
        if not self.lambda_n > 0:
            raise ValueError("lambda_n must be positive")
        if self.K_n < 0:
            raise ValueError("K_n must be non-negative")
        if self.kappa is not None and self.kappa < 1:
            raise ValueError("kappa must be a positive integer")

    def half_width(self, L: Number) -> int:
        """Largest site index ``i`` with ``|i / L| <= lambda_n``."""
        return int(math.floor(self.lambda_n * L + 1e-12))

    def sites(self, L: Number) -> range:
        I = self.half_width(L)
        return range(-I, I + 1)

    def contains(self, site: int, L: Number) -> bool:
        return abs(site) <= self.half_width(L)


# ---------------------------------------------------------------- configuration


def _clean(demes: Mapping[int, Mapping[int, int]]) -> tuple:
    items = []
    for site in sorted(demes):
        hist = demes[site]
        row = []
        for k in sorted(hist):
            c = hist[k]
            if c < 0 or int(c) != c:
                raise ValueError(f"invalid count {c} at site {site}, type {k}")
            if k < 0:
                raise ValueError(f"negative mutation count {k}")
            if c:
                row.append((int(k), int(c)))
        if row:
            items.append((int(site), tuple(row)))
    return tuple(items)


@dataclass(frozen=True)
class Configuration:
    """Finite-support configuration: site -> (mutation count -> particles)."""

    items: tuple = ()
    support_radius: int = 0

    @classmethod
    def from_dict(cls, demes: Mapping[int, Mapping[int, int]],
                  support_radius: int | None = None) -> "Configuration":
        items = _clean(demes)
        r = max((abs(s) for s, _ in items), default=0)
        if support_radius is None:
            support_radius = r
        if support_radius < r:
            raise ValueError("support_radius smaller than the occupied range")
        return cls(items, int(support_radius))

    @classmethod
    def empty(cls) -> "Configuration":
        return cls((), 0)

    @classmethod
    def uniform(cls, occupancy: int, half_width: int) -> "Configuration":
        """``occupancy`` type-0 particles at every site in ``[-a, a]``."""
        return cls.from_dict({i: {0: occupancy} for i in range(-half_width, half_width + 1)})

    def to_dict(self) -> dict[int, dict[int, int]]:
        return {s: dict(row) for s, row in self.items}

    def sites(self) -> list[int]:
        return [s for s, _ in self.items]

    def deme(self, site: int) -> dict[int, int]:
        for s, row in self.items:
            if s == site:
                return dict(row)
        return {}

    def total(self, site: int) -> int:
        return sum(self.deme(site).values())

    def totals(self) -> dict[int, int]:
        return {s: sum(c for _, c in row) for s, row in self.items}

    def mass(self) -> int:
        return sum(c for _, row in self.items for _, c in row)

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        for s, row in self.items:
            for k, c in row:
                yield s, k, c

    def __add__(self, other: "Configuration") -> "Configuration":
        d = self.to_dict()
        for s, k, c in other:
            d.setdefault(s, {})
            d[s][k] = d[s].get(k, 0) + c
        return Configuration.from_dict(d, max(self.support_radius, other.support_radius))


def _position(site: int, L: Number) -> Number:
    return site / L


def norm_S(c: Configuration, L: Number) -> float:
    """Weighted l1 norm ``sum_x ||c(x)|| / (1 + |x|)^2``."""
    return psi_p(c, 1, L)


def dist_S(a: Configuration, b: Configuration, L: Number) -> float:
    da, db = a.to_dict(), b.to_dict()
    total = 0.0
    for site in sorted(set(da) | set(db)):
        ha, hb = da.get(site, {}), db.get(site, {})
        diff = sum(abs(ha.get(k, 0) - hb.get(k, 0)) for k in set(ha) | set(hb))
        total += diff / (1 + abs(_position(site, L))) ** 2
    return total


def psi_p(c: Configuration, p: int, L: Number) -> float:
    """``sum_x ||c(x)||^p / (1 + |x|)^(2p)``."""
    if p < 1:
        raise ValueError("p must be a positive integer")
    total = 0.0
    for site, n in c.totals().items():
        total += n ** p / (1 + abs(_position(site, L))) ** (2 * p)
    return total


@dataclass(frozen=True)
class S0Report:
    member: bool
    sup_occupancy: int
    max_mutation_count: int


def in_S0(c: Configuration) -> S0Report:
    """Finite support always lies in the initial-condition set; report the scan."""
    sup = max(c.totals().values(), default=0)
    kmax = max((k for _, k, _ in c), default=0)
    return S0Report(True, sup, kmax)


# ---------------------------------------------------------------- text format

_HEADER = "# ratchet configuration v1"


def dump_configuration(c: Configuration, L: Number) -> str:
    lines = [_HEADER, f"L {L!r}", f"support_radius {c.support_radius}"]
    lines += [f"{s} {k} {n}" for s, k, n in c]
    return "\n".join(lines) + "\n"


def load_configuration(text: str) -> tuple[Configuration, float]:
    """Inverse of :func:`dump_configuration`; returns ``(config, L)``."""
    L = None
    radius = None
    demes: dict[int, dict[int, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "L":
                L = float(parts[1])
            elif parts[0] == "support_radius":
                radius = int(parts[1])
            else:
                s, k, n = (int(x) for x in parts)
                if k in demes.get(s, {}):
                    raise ParseError(f"duplicate entry for site {s}, type {k}", lineno, 1)
                demes.setdefault(s, {})[k] = n
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad configuration line {raw!r}: {exc}", lineno, 1) from exc
    if L is None or radius is None:
        raise ParseError("missing L or support_radius header", 1, 1)
    return Configuration.from_dict(demes, radius), L


# ---------------------------------------------------------------- dict form


def _num_out(v: Number):
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    return v


def _num_in(v):
    if isinstance(v, str):
        return Fraction(v)
    return v


def params_to_dict(p: ModelParams) -> dict:
    if isinstance(p.fitness, Geometric):
        fit = {"geometric": _num_out(p.fitness.s)}
    else:
        fit = {"explicit": [_num_out(v) for v in p.fitness.values]}
    return {
        "L": _num_out(p.L), "m": _num_out(p.m), "N": int(p.N), "mu": _num_out(p.mu),
        "fitness": fit,
        "q_plus": [_num_out(c) for c in p.q_plus],
        "q_minus": [_num_out(c) for c in p.q_minus],
    }


def params_from_dict(d: Mapping) -> ModelParams:
    fit = d["fitness"]
    if "geometric" in fit:
        fitness: FitnessSpec = Geometric(_num_in(fit["geometric"]))
    else:
        fitness = Explicit(_num_in(v) for v in fit["explicit"])
    return ModelParams(
        L=_num_in(d["L"]), m=_num_in(d["m"]), N=int(d["N"]), mu=_num_in(d["mu"]),
        fitness=fitness,
        q_plus=tuple(_num_in(c) for c in d["q_plus"]),
        q_minus=tuple(_num_in(c) for c in d["q_minus"]),
    )
