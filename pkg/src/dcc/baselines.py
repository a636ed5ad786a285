"""Baseline engines: importance sampling from the prior, and a global
single-site random-walk MH chain over whole traces.

Both are budgeted in program executions, like the main engine, so results
are comparable at equal cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .dists import NEG_INF
from .interp import ExecutionMeter, Program, base_address, run_prior, run_replay
from .localinfer import (
    ChainState,
    EmpiricalMeasure,
    KernelParams,
    ZStats,
    mh_log_alpha,
    pimais_round,
    propose_site_value,
)
from .trace import path_of

__all__ = ["BaselineResult", "run_is", "run_rmh"]


@dataclass
class BaselineResult:
    measure: EmpiricalMeasure
    log_z: Optional[float]
    diagnostics: dict = field(default_factory=dict)
    n_executions: int = 0


def run_is(program: Program, budget: int, rng,
           meter: Optional[ExecutionMeter] = None) -> BaselineResult:
    """`budget` prior runs, weighted by their observation likelihood.

    The marginal-likelihood estimate is the mean weight; the measure is the
    self-normalised particle set.
    """
    if budget < 1:
        raise ValueError("run_is: budget must be >= 1")
    meter = meter if meter is not None else ExecutionMeter()
    zstats = ZStats()
    entries = []
    while meter.count < budget:
        trace = run_prior(program, rng, meter)
        log_w = sum(o.log_lik for o in trace.observations)
        zstats.add(log_w)
        entries.append((trace.values(), trace.return_value, log_w))
    measure = EmpiricalMeasure.from_log_weights(entries)
    return BaselineResult(
        measure=measure,
        log_z=zstats.log_z,
        diagnostics={"n_particles": len(entries), "max_log_w": zstats.max_log_w},
        n_executions=meter.count,
    )


class _ZhatShim:
    """Minimal record stand-in so the mixture-IS round can run around a
    single chain state (the marginal-likelihood add-on for the MH baseline)."""

    def __init__(self, path, trace, zstats):
        self.path = path
        self.chains = [ChainState(trace)]
        self.zstats = zstats
        self.is_particles = []
        self.pi_mode = "mcmc"
        self.last_round_log_ws = []


def run_rmh(program: Program, budget: int, rng,
            kernel: KernelParams = KernelParams(),
            meter: Optional[ExecutionMeter] = None,
            keep_cap: int = 10_000,
            zhat_every: int = 0,
            zhat_scale: float = 1.0) -> BaselineResult:
    """Global single-site MH over full traces.

    Each step picks one draw uniformly at random, proposes with the kernel
    (prior resample for discrete sites, a prior/random-walk mixture for
    continuous ones), re-executes downstream with fresh prior fallback, and
    accepts with the trace-move ratio including the prior terms of fresh
    and abandoned draws.  The kept-state stream includes repeats; it is
    thinned to at most `keep_cap` states.  Per-step path ids and acceptance
    flags are recorded.

    With ``zhat_every = k > 0``, every k-th step also draws one importance
    sample from a proposal centered on the chain (a marginal-likelihood
    read-out for a sampler that has none of its own; heuristic).
    """
    if budget < 1:
        raise ValueError("run_rmh: budget must be >= 1")
    meter = meter if meter is not None else ExecutionMeter()
    trace = run_prior(program, rng, meter)

    path_table: dict = {}
    path_ids: list = []
    accepts: list = []
    kept: list = []
    zstats = ZStats() if zhat_every else None

    thin = max(1, budget // keep_cap)

    def path_id(p) -> int:
        idx = path_table.get(p)
        if idx is None:
            idx = len(path_table)
            path_table[p] = idx
        return idx

    step = 0
    max_steps = 50 * budget  # safety valve for rejection-only pathologies
    while meter.count < budget and step < max_steps:
        draws = trace.draws
        if draws:
            pos = int(rng.integers(len(draws)))
            d = draws[pos]
            v2, lq_fwd, lq_rev = propose_site_value(d.dist, d.value, kernel, rng)
            if d.dist.log_density(v2) == NEG_INF:
                accepted = False  # proposal outside the prior support
            else:
                store = {base_address(dr.address): dr.value for dr in draws}
                store[base_address(d.address)] = v2
                out = run_replay(program, store, rng, meter)
                new_trace = out.trace
                log_alpha = mh_log_alpha(
                    trace, new_trace, lq_fwd, lq_rev, out.fresh,
                    n_free_old=len(draws), n_free_new=len(new_trace.draws),
                )
                accepted = log_alpha >= 0.0 or math.log(rng.random()) < log_alpha
                if accepted:
                    trace = new_trace
        else:
            # no draws to update; the chain has a single state
            run_replay(program, {}, rng, meter)
            accepted = True
        step += 1
        path_ids.append(path_id(path_of(trace)))
        accepts.append(accepted)
        if step % thin == 0:
            kept.append((trace.values(), trace.return_value))
        if zhat_every and step % zhat_every == 0:
            shim = _ZhatShim(path_of(trace), trace, zstats)
            pimais_round(shim, program, 1, zhat_scale, rng, meter, retain=False)

    if not kept:
        kept.append((trace.values(), trace.return_value))
    measure = EmpiricalMeasure.unweighted(kept)
    paths = [None] * len(path_table)
    for p, idx in path_table.items():
        paths[idx] = p
    return BaselineResult(
        measure=measure,
        log_z=zstats.log_z if zstats is not None else None,
        diagnostics={
            "paths": paths,
            "path_ids": path_ids,
            "accepted": accepts,
            "thin": thin,
            "acceptance_rate": (sum(accepts) / len(accepts)) if accepts else 0.0,
        },
        n_executions=meter.count,
    )
