"""Interpreter for generative programs under pluggable sample handlers.

A :class:`Program` wraps a deterministic host-language procedure written
against the effect interface: ``ctx.sample(site, dist, split=False)`` and
``ctx.observe(dist, value)``.  Executing it under different handlers gives
prior sampling (:func:`run_prior`), replay of stored draws with fresh
fallback (:func:`run_replay`), and strict scoring of a fixed draw vector
against a fixed path (:func:`score_trace`).

All entry points count one program execution on the supplied
:class:`ExecutionMeter`; that count is the budget unit shared by every
inference engine in this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

from .dists import NEG_INF, Support
from .trace import Address, Draw, Observation, Trace, path_of

__all__ = [
    "Program",
    "ExecutionMeter",
    "ModelError",
    "run_prior",
    "run_replay",
    "score_trace",
    "draw_store",
    "base_address",
    "ReplayOutcome",
]


@dataclass(frozen=True)
class Program:
    """A generative procedure plus metadata.

    The procedure must be pure up to its effect calls: identical responses
    to its sample requests produce the identical request sequence and
    return value.
    """

    name: str
    fn: Callable[["_Context"], Any]
    n_thresh: Optional[int] = None  # per-program override of the overflow bound


class ModelError(RuntimeError):
    """A model raised during execution; carries the last site for context."""

    def __init__(self, program: str, site: Optional[str], cause: BaseException):
        super().__init__(f"model {program!r} failed (last site: {site}): {cause!r}")
        self.site = site
        self.cause = cause


class _PathDeparture(Exception):
    """Internal control signal: execution left the expected path."""


@dataclass
class ExecutionMeter:
    """Counts program executions, the budget unit of every engine."""

    count: int = 0

    def tick(self, n: int = 1):
        self.count += n


def base_address(addr: Address) -> tuple:
    """Store key of an address: (site, occurrence), ignoring any split value."""
    return (addr.site, addr.occurrence)


def draw_store(trace: Trace, override: Optional[dict] = None) -> dict:
    """Build a replay store {(site, occurrence): value} from a trace's draws."""
    store = {base_address(d.address): d.value for d in trace.draws}
    if override:
        for key, value in override.items():
            store[key if isinstance(key, tuple) and not isinstance(key, Address) else base_address(key)] = value
    return store


class _Context:
    """Shared bookkeeping for one execution: addresses, terms, totals."""

    __slots__ = ("draws", "observations", "log_gamma", "_site_counts", "_current_site")

    def __init__(self):
        self.draws = []
        self.observations = []
        self.log_gamma = 0.0
        self._site_counts = {}
        self._current_site = None

    def _next_address(self, site: str, split: bool, value=None) -> Address:
        occ = self._site_counts.get(site, 0)
        self._site_counts[site] = occ + 1
        return Address(site, occ, value if split else None)

    def _record(self, addr: Address, value, dist):
        lp = dist.log_density(value)
        self.draws.append(Draw(addr, value, lp, dist))
        self.log_gamma += lp

    def observe(self, dist, value, site: Optional[str] = None):
        name = site if site is not None else f"obs{len(self.observations)}"
        self._current_site = name
        ll = dist.log_density(value)
        self.observations.append(Observation(name, ll))
        self.log_gamma += ll

    def _finish(self, return_value) -> Trace:
        return Trace(
            draws=tuple(self.draws),
            observations=tuple(self.observations),
            log_gamma=self.log_gamma,
            return_value=return_value,
        )


def _check_split(dist, split: bool, site: str):
    if split and dist.support is Support.CONTINUOUS:
        raise ValueError(f"site {site!r}: split marks are for discrete sites only")


class _PriorContext(_Context):
    __slots__ = ("rng",)

    def __init__(self, rng):
        super().__init__()
        self.rng = rng

    def sample(self, site: str, dist, split: bool = False):
        self._current_site = site
        _check_split(dist, split, site)
        value = dist.sample(self.rng)
        addr = self._next_address(site, split, value)
        self._record(addr, value, dist)
        return value


class _ReplayContext(_Context):
    """Reuse stored values where the address and support class match; fall
    back to a fresh prior draw otherwise (including values now out of
    support).  Tracks which addresses were reused vs freshly drawn."""

    __slots__ = ("rng", "store", "reused", "fresh")

    def __init__(self, store: dict, rng):
        super().__init__()
        self.rng = rng
        self.store = store
        self.reused = []
        self.fresh = []

    def sample(self, site: str, dist, split: bool = False):
        self._current_site = site
        _check_split(dist, split, site)
        occ = self._site_counts.get(site, 0)
        key = (site, occ)
        value = self.store.get(key)
        if value is not None and _compatible(dist, value) and dist.log_density(value) > NEG_INF:
            addr = self._next_address(site, split, value)
            self._record(addr, value, dist)
            self.reused.append(addr)
            return value
        value = dist.sample(self.rng)
        addr = self._next_address(site, split, value)
        self._record(addr, value, dist)
        self.fresh.append(addr)
        return value


def _compatible(dist, value) -> bool:
    sup = dist.support
    if sup is Support.CONTINUOUS:
        return isinstance(value, float)
    if sup is Support.INTEGER or sup is Support.INDEX:
        return isinstance(value, int) and not isinstance(value, bool)
    return False


class _StrictContext(_Context):
    """Consume exactly the given (path, values); any divergence is a departure."""

    __slots__ = ("expected_path", "values", "pos")

    def __init__(self, expected_path, values):
        super().__init__()
        self.expected_path = tuple(expected_path)
        self.values = tuple(values)
        self.pos = 0

    def sample(self, site: str, dist, split: bool = False):
        self._current_site = site
        _check_split(dist, split, site)
        if self.pos >= len(self.expected_path):
            raise _PathDeparture
        value = self.values[self.pos]
        addr = self._next_address(site, split, value)
        if addr != self.expected_path[self.pos]:
            raise _PathDeparture
        if not _compatible(dist, value):
            raise _PathDeparture
        self.pos += 1
        self._record(addr, value, dist)
        return value


def _execute(program: Program, ctx: _Context, meter: Optional[ExecutionMeter]):
    if meter is not None:
        meter.tick()
    try:
        out = program.fn(ctx)
    except (_PathDeparture, ModelError):
        raise
    except Exception as exc:
        raise ModelError(program.name, ctx._current_site, exc) from exc
    return ctx._finish(out)


def run_prior(program: Program, rng, meter: Optional[ExecutionMeter] = None) -> Trace:
    """Execute forward, drawing every sample from its prior.

    Observations do not block execution; their likelihood terms are still
    accumulated into log gamma.
    """
    return _execute(program, _PriorContext(rng), meter)


class ReplayOutcome:
    __slots__ = ("trace", "reused", "fresh")

    def __init__(self, trace, reused, fresh):
        self.trace = trace
        self.reused = reused  # list of reused addresses
        self.fresh = fresh    # list of freshly drawn addresses

    def __iter__(self):  # (trace, reused_count, fresh_count)
        yield self.trace
        yield len(self.reused)
        yield len(self.fresh)


def run_replay(program: Program, store: dict, rng,
               meter: Optional[ExecutionMeter] = None) -> ReplayOutcome:
    """Re-execute, consuming stored values at matching addresses.

    The store maps (site, occurrence) to a proposed value (see
    :func:`draw_store`).  A stored value is reused when its support class
    matches the distribution now at that address and it lies inside the
    current support; its log prior is recomputed under the current
    parameters.  Everything else is a fresh prior draw.
    """
    ctx = _ReplayContext(store, rng)
    trace = _execute(program, ctx, meter)
    return ReplayOutcome(trace, ctx.reused, ctx.fresh)


def score_trace(program: Program, path, values,
                meter: Optional[ExecutionMeter] = None) -> float:
    """Log gamma of a complete draw vector on a fixed path.

    Returns -inf when execution departs the path (control flow leaves it,
    the value count mismatches, or a value's support class changed); this
    is a finite outcome, not an error.
    """
    path = tuple(path)
    values = tuple(values)
    if len(path) != len(values):
        return NEG_INF
    ctx = _StrictContext(path, values)
    try:
        trace = _execute(program, ctx, meter)
    except _PathDeparture:
        return NEG_INF
    if ctx.pos != len(values):
        return NEG_INF
    return trace.log_gamma


def strict_trace(program: Program, path, values,
                 meter: Optional[ExecutionMeter] = None) -> Optional[Trace]:
    """Like :func:`score_trace` but returns the full trace, or None off-path."""
    path = tuple(path)
    values = tuple(values)
    if len(path) != len(values):
        return None
    ctx = _StrictContext(path, values)
    try:
        trace = _execute(program, ctx, meter)
    except _PathDeparture:
        return None
    if ctx.pos != len(values):
        return None
    return trace
