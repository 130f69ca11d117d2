"""Exact simulation and verification tools for a spatial Muller's ratchet model."""

from .errors import (
    DegreeViolation,
    DominationBroken,
    FitnessViolation,
    GuardViolation,
    HorizonOverflow,
    InvariantBroken,
    NegativePolynomial,
    NoSuchU,
    NonMonotoneDeath,
    ParamsInvalid,
    ParseError,
    PreconditionViolated,
    RatchetError,
    SizeLimit,
    SnapshotMismatch,
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
    dist_S,
    fisher_kpp,
    in_S0,
    norm_S,
    psi_p,
    ratchet_preset,
    validate_params,
)
from .rng import Stream, seed_stream
from .engine import (
    replay,
    simulate_domination_pair,
    simulate_eta_n,
    simulate_zeta,
    state_at,
)
from .infection import compute_U_eps, high_density_guard_check, init_coupling, simulate_coupling

__all__ = [
    "DegreeViolation",
    "DominationBroken",
    "FitnessViolation",
    "GuardViolation",
    "HorizonOverflow",
    "InvariantBroken",
    "NegativePolynomial",
    "NoSuchU",
    "NonMonotoneDeath",
    "ParamsInvalid",
    "ParseError",
    "PreconditionViolated",
    "RatchetError",
    "SizeLimit",
    "SnapshotMismatch",
    "UsageError",
    "ValidationError",
    "ViolationError",
    "Configuration",
    "Explicit",
    "Geometric",
    "ModelParams",
    "TruncationParams",
    "dist_S",
    "fisher_kpp",
    "in_S0",
    "norm_S",
    "psi_p",
    "ratchet_preset",
    "validate_params",
    "Stream",
    "seed_stream",
    "replay",
    "simulate_domination_pair",
    "simulate_eta_n",
    "simulate_zeta",
    "state_at",
    "compute_U_eps",
    "high_density_guard_check",
    "init_coupling",
    "simulate_coupling",
]

__version__ = "0.1.0"
