"""Shared checks for tests and the acceptance run."""

from __future__ import annotations

from itertools import groupby

from ratchet.engine import BIRTH, DEATH, MIGRATE_LEFT


def apply_record(d: dict, rec) -> None:
    """Apply one event record to a site -> {k: count} dict."""
    def bump(site, k, delta):
        h = d.setdefault(site, {})
        h[k] = h.get(k, 0) + delta
        if h[k] == 0:
            del h[k]
    if rec.kind == BIRTH:
        bump(rec.deme, rec.k, 1)
    elif rec.kind == DEATH:
        bump(rec.deme, rec.k, -1)
    else:
        dst = rec.deme - 1 if rec.kind == MIGRATE_LEFT else rec.deme + 1
        bump(rec.deme, rec.k, -1)
        bump(dst, rec.k, 1)


def domination_violations(pair) -> int:
    """Replay both logs in time order; count times at which zeta < ||eta|| somewhere."""
    eta = pair.eta.init.to_dict()
    zeta = pair.zeta.init.to_dict()
    merged = sorted([(r.time, 0, r) for r in pair.eta.events]
                    + [(r.time, 1, r) for r in pair.zeta.events], key=lambda x: (x[0], x[1]))
    bad = 0

    def check():
        for site in set(eta) | set(zeta):
            if sum(zeta.get(site, {}).values()) < sum(eta.get(site, {}).values()):
                return 1
        return 0

    bad += check()
    for _, group in groupby(merged, key=lambda x: x[0]):
        for _, which, rec in group:
            apply_record(eta if which == 0 else zeta, rec)
        bad += check()
    return bad


def exterior(d: dict, half_width: int) -> dict:
    return {s: h for s, h in d.items() if abs(s) > half_width and h}


# acceptance criteria outcomes, printed by the terminal summary hook in conftest
CRITERIA: dict = {}


class criterion:
    """Record one acceptance criterion; it stays FAIL unless the block completes."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: dict = {}

    def __enter__(self):
        CRITERIA[self.number] = ("FAIL", self.title, self.details)
        return self.details

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            CRITERIA[self.number] = ("PASS", self.title, self.details)
        else:
            self.details["error"] = f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        return False


def criterion_line(number: int) -> str:
    status, title, details = CRITERIA[number]
    extra = ", ".join(f"{k}={v}" for k, v in details.items())
    return f"criterion {number}: {status} {title}" + (f" ({extra})" if extra else "")
