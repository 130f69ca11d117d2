"""Exception hierarchy.

``UsageError`` subclasses map to CLI exit code 1 and ``ViolationError``
subclasses to exit code 2.
"""


class RatchetError(Exception):
    pass


class UsageError(RatchetError):
    pass


class ViolationError(RatchetError):
    """An internal invariant or guard failed; must never happen."""


class ParamsInvalid(UsageError):
    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or [message]


class DegreeViolation(ParamsInvalid):
    pass


class NegativePolynomial(ParamsInvalid):
    pass


class FitnessViolation(ParamsInvalid):
    pass


class ParseError(UsageError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(UsageError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class PreconditionViolated(UsageError):
    pass


class SizeLimit(UsageError):
    pass


class NonMonotoneDeath(UsageError):
    pass


class NoSuchU(UsageError):
    pass


class HorizonOverflow(RatchetError):
    pass


class SnapshotMismatch(ViolationError):
    pass


class DominationBroken(ViolationError):
    pass


class InvariantBroken(ViolationError):
    pass


class GuardViolation(ViolationError):
    pass
