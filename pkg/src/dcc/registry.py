"""Dynamic discovery and bookkeeping of straight-line programs (SLPs).

The registry keeps every path ever seen (the total stack) and the subset
currently receiving inference effort (the active stack).  Paths are found
by forward prior runs and by MCMC proposals; a path is promoted to active
once it has been proposed often enough, with the threshold growing slowly
over iterations so late-stage discoveries need more evidence.  Paths
longer than the overflow bound are lumped into a single catch-all record
estimated by prior importance sampling, keeping the number of tracked
sub-programs finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dists import NEG_INF
from .interp import ExecutionMeter, Program, run_prior
from .localinfer import ChainState, KernelParams, ZStats, local_mh_step, pimais_round
from .trace import Path, Trace, path_of

__all__ = [
    "SlpRecord",
    "Registry",
    "init_discovery",
    "record_proposal",
    "promote_eligible",
    "warm_up",
    "registry_report",
    "DISCOVERED",
    "ACTIVE",
    "EVICTED",
    "OVERFLOW",
]

DISCOVERED = "discovered"
ACTIVE = "active"
EVICTED = "evicted"
OVERFLOW = "overflow"

DEFAULT_N_THRESH = 1000


@dataclass
class SlpRecord:
    """Mutable per-path state: counts, chains, weight statistics, samples."""

    id: int
    path: Optional[Path]  # None for the overflow record
    status: str = DISCOVERED
    C: int = 0            # times a proposal landed on this path
    S: int = 0            # post-activation allocation count
    seed_trace: Optional[Trace] = None
    best_log_gamma: float = NEG_INF
    chains: list = field(default_factory=list)
    zstats: ZStats = field(default_factory=ZStats)
    mcmc_samples: list = field(default_factory=list)
    is_particles: list = field(default_factory=list)
    pi_mode: str = "mcmc"
    kernel_params: KernelParams = KernelParams()
    rng: Optional[np.random.Generator] = None
    last_round_log_ws: list = field(default_factory=list)

    @property
    def log_z(self) -> float:
        return self.zstats.log_z

    def note_trace(self, trace: Trace):
        if trace.log_gamma > self.best_log_gamma:
            self.best_log_gamma = trace.log_gamma
        if self.seed_trace is None or trace.log_gamma > self.seed_trace.log_gamma:
            self.seed_trace = trace


class Registry:
    """Total and active stacks of discovered paths."""

    def __init__(self, c0_base: int = 3, active_cap: int = 50,
                 n_thresh: int = DEFAULT_N_THRESH, pi_mode: str = "mcmc",
                 kernel_params: KernelParams = KernelParams(),
                 seed_seq: Optional[np.random.SeedSequence] = None):
        self.records: list[SlpRecord] = []
        self.by_path: dict = {}
        self.c0_base = c0_base
        self.active_cap = active_cap
        self.n_thresh = n_thresh
        self.pi_mode = pi_mode
        self.kernel_params = kernel_params
        self.iteration = 0
        self._seed_seq = seed_seq if seed_seq is not None else np.random.SeedSequence(0)
        # the catch-all record for paths beyond the overflow bound exists from
        # the start so its prior-IS average counts every forward run
        self.overflow = self._new_record(None, OVERFLOW)

    # -- stacks ---------------------------------------------------------

    def active_records(self) -> list:
        return [r for r in self.records if r.status == ACTIVE]

    def non_active_records(self) -> list:
        """Discovered or evicted records (never the overflow one)."""
        return [r for r in self.records if r.status in (DISCOVERED, EVICTED)]

    def c0(self) -> int:
        """Promotion threshold; grows slowly and unboundedly with iterations."""
        return self.c0_base * math.ceil(math.log2(2.0 + self.iteration / 1000.0))

    def _new_record(self, path: Optional[Path], status: str) -> SlpRecord:
        rec = SlpRecord(
            id=len(self.records),
            path=path,
            status=status,
            pi_mode=self.pi_mode,
            kernel_params=self.kernel_params,
            rng=np.random.default_rng(self._seed_seq.spawn(1)[0]),
        )
        self.records.append(rec)
        if path is not None:
            self.by_path[path] = rec
        return rec

    def max_log_w(self) -> float:
        """Largest importance log-weight seen anywhere (the global threshold)."""
        return max((r.zstats.max_log_w for r in self.records), default=NEG_INF)


def record_proposal(registry: Registry, path: Path, proposing_trace: Trace) -> bool:
    """Count one proposal landing on `path`; register the path if unseen.

    The proposing trace is kept as the warm-up seed.  Paths longer than the
    overflow bound are routed to the single overflow record.  Returns True
    when the path is new.
    """
    if len(path) > registry.n_thresh:
        registry.overflow.C += 1
        registry.overflow.note_trace(proposing_trace)
        return False
    rec = registry.by_path.get(path)
    if rec is not None:
        rec.C += 1
        rec.note_trace(proposing_trace)
        return False
    rec = registry._new_record(path, DISCOVERED)
    rec.C = 1
    rec.note_trace(proposing_trace)
    return True


def init_discovery(program: Program, t0: int, rng, *,
                   meter: Optional[ExecutionMeter] = None,
                   c0_base: int = 3, active_cap: int = 50,
                   n_thresh: Optional[int] = None, pi_mode: str = "mcmc",
                   kernel_params: KernelParams = KernelParams(),
                   seed_seq: Optional[np.random.SeedSequence] = None) -> Registry:
    """Run the program forward `t0` times and register the paths traversed.

    Every prior trace also feeds the overflow record's prior-importance
    estimate (with weight zero when the trace does not overflow), so that
    record's Z-hat stays an unbiased prior-IS average.
    """
    if t0 < 1:
        raise ValueError("init_discovery: t0 must be >= 1")
    registry = Registry(
        c0_base=c0_base,
        active_cap=active_cap,
        n_thresh=n_thresh if n_thresh is not None else (program.n_thresh or DEFAULT_N_THRESH),
        pi_mode=pi_mode,
        kernel_params=kernel_params,
        seed_seq=seed_seq,
    )
    for _ in range(t0):
        trace = run_prior(program, rng, meter)
        record_proposal(registry, path_of(trace), trace)
        _overflow_is_entry(registry, trace)
    return registry


def _overflow_is_entry(registry: Registry, prior_trace: Trace):
    """Feed one unconditional prior run into the overflow record's stats."""
    if registry.overflow is None:
        return
    if prior_trace.n_draws > registry.n_thresh:
        log_w = sum(o.log_lik for o in prior_trace.observations)
        registry.overflow.zstats.add(log_w)
        registry.overflow.is_particles.append(
            (prior_trace.values(), prior_trace.return_value, log_w)
        )
    else:
        registry.overflow.zstats.add(NEG_INF)


def overflow_refresh(registry: Registry, program: Program, n_runs: int, rng,
                     meter: Optional[ExecutionMeter] = None):
    """Prior-IS round for the overflow record; also counts paths it visits."""
    for _ in range(n_runs):
        trace = run_prior(program, rng, meter)
        record_proposal(registry, path_of(trace), trace)
        _overflow_is_entry(registry, trace)


def promote_eligible(registry: Registry) -> list:
    """Activate every discovered record whose proposal count has reached the
    current threshold, respecting the active-set cap.

    When the cap is full, the active record with the smallest best-seen log
    gamma is evicted to make room (and never returns to the active stack).
    Returns the ids of newly activated records.
    """
    c0 = registry.c0()
    eligible = [r for r in registry.records if r.status == DISCOVERED and r.C >= c0]
    eligible.sort(key=lambda r: (-r.C, r.id))
    promoted = []
    for rec in eligible:
        active = registry.active_records()
        if len(active) >= registry.active_cap:
            worst = min(active, key=lambda r: (r.best_log_gamma, -r.id))
            worst.status = EVICTED
        rec.status = ACTIVE
        promoted.append(rec.id)
    return promoted


def ensure_chains(registry: Registry, rec: SlpRecord, program: Program,
                  n_chains: int, t_init: int, m_per_chain: int,
                  proposal_scale: float, meter=None, on_off_path=None):
    """Initialise a record's chains if absent: clone the seed, run greedy
    burn-in steps keeping only the final states, then one IS round for the
    initial Z-hat."""
    if rec.chains:
        return
    warm_up(
        registry, rec.id, program,
        t_init=t_init, n_chains=n_chains, m_per_chain=m_per_chain,
        proposal_scale=proposal_scale, meter=meter, on_off_path=on_off_path,
    )


def warm_up(registry: Registry, rec_id: int, program: Program, *, t_init: int,
            n_chains: int, m_per_chain: int, proposal_scale: float,
            rng=None, meter=None, on_off_path=None):
    """Greedy burn-in for one record: each of the N chains starts at the
    seed trace and takes `t_init` single-site steps that are accepted only
    on a strict log-gamma increase; only the final states are kept.  One IS
    round then seeds the record's Z-hat."""
    rec = registry.records[rec_id]
    if rec.status == OVERFLOW:
        return
    if rec.seed_trace is None:
        raise ValueError(f"record {rec_id} has no seed trace")
    rng = rng if rng is not None else rec.rng
    path = rec.path
    greedy = KernelParams(
        p_prior=rec.kernel_params.p_prior,
        rw_scale=rec.kernel_params.rw_scale,
        greedy=True,
    )
    scales = [rec.kernel_params.rw_scale] * len(path)
    rec.chains = []
    for _ in range(n_chains):
        chain = ChainState(rec.seed_trace, list(scales))
        for _ in range(t_init):
            chain, _, off = local_mh_step(chain, path, program, greedy, rng, meter)
            if off is not None and on_off_path is not None:
                on_off_path(off)
        rec.chains.append(chain)
        if chain.trace.log_gamma > rec.best_log_gamma:
            rec.best_log_gamma = chain.trace.log_gamma
    pimais_round(rec, program, m_per_chain, proposal_scale, rng, meter)


def registry_report(records) -> str:
    """Structured text table over per-path state (total stack order).

    Accepts live records or result summaries: anything with id, status, C,
    S, log_z, and path.
    """
    lines = [f"{'id':>4} {'status':<10} {'C':>6} {'S':>6} {'log_Z':>14}  path"]
    for r in records:
        z_txt = f"{r.log_z:.4f}" if r.log_z > NEG_INF else "-inf"
        path_txt = "<overflow>" if r.path is None else "[" + " ".join(str(a) for a in r.path) + "]"
        lines.append(f"{r.id:>4} {r.status:<10} {r.C:>6} {r.S:>6} {z_txt:>14}  {path_txt}")
    return "\n".join(lines)
