"""Execution traces, sample addresses, and per-path density bookkeeping.

A trace records one run of a generative program: the ordered sample draws
(address, value, log prior term), the observation log-likelihood terms,
and their total log gamma.  The ordered address sequence is the trace's
path; all traces sharing a path form one straight-line program (SLP) with
fixed support.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, NamedTuple

NEG_INF = float("-inf")


class Address(NamedTuple):
    """Identity of one sample draw: static site id plus occurrence count.

    ``split_value`` is set only for sites declared "split": their sampled
    value is part of the address, so every distinct value starts a distinct
    path.
    """

    site: str
    occurrence: int
    split_value: Any = None

    def __str__(self):
        base = f"{self.site}:{self.occurrence}"
        if self.split_value is not None:
            base += f"@{self.split_value}"
        return base


Path = tuple  # tuple[Address, ...]; value equality and hashing


class Draw(NamedTuple):
    address: Address
    value: Any
    log_prior: float
    dist: Any  # distribution the value was scored under (replay convenience)


class Observation(NamedTuple):
    site: str
    log_lik: float


@dataclass(frozen=True)
class Trace:
    draws: tuple          # tuple[Draw, ...] in execution order
    observations: tuple   # tuple[Observation, ...] in execution order
    log_gamma: float      # sum of all prior and likelihood terms
    return_value: Any = None

    @property
    def n_draws(self) -> int:
        return len(self.draws)

    def values(self) -> tuple:
        return tuple(d.value for d in self.draws)


def path_of(trace: Trace) -> Path:
    """Address sequence of the trace, in execution order."""
    return tuple(d.address for d in trace.draws)


def log_gamma_k(trace: Trace, slp_path: Path) -> float:
    """Unnormalised log density of `trace` restricted to one SLP.

    Equals the trace's own log gamma when the trace lies on `slp_path`,
    and -inf otherwise (the SLP indicator).
    """
    if path_of(trace) == tuple(slp_path):
        return trace.log_gamma
    return NEG_INF


def recompute_log_gamma(trace: Trace) -> float:
    """Re-sum the stored terms; used to check the log_gamma invariant."""
    return sum(d.log_prior for d in trace.draws) + sum(o.log_lik for o in trace.observations)


def trace_record(trace: Trace) -> str:
    """A line-oriented text rendering of the trace, for debugging and goldens."""
    lines = []
    for d in trace.draws:
        lines.append(f"draw {d.address} = {d.value!r} prior {d.log_prior!r}")
    for o in trace.observations:
        lines.append(f"obs {o.site} loglik {o.log_lik!r}")
    lines.append(f"log_gamma {trace.log_gamma!r}")
    lines.append(f"return {trace.return_value!r}")
    return "\n".join(lines)


def path_digest(path) -> str:
    """Short stable digest of a path, for log records."""
    if path is None:
        return "overflow"
    h = hashlib.sha1("|".join(str(a) for a in path).encode()).hexdigest()[:10]
    return f"{len(path)}:{h}"
