"""Orchestration of divide / conquer / combine inference.

One run is: forward discovery of paths, then iterations of {promote and
warm up newly eligible paths -> pick the active path with the largest
utility -> advance its chains and refresh its marginal-likelihood estimate
-> one global exploration proposal from its chains to find new paths},
and finally a combination of the per-path estimates:

    pi_hat = sum_k Z_hat_k * pi_hat_k / sum_k Z_hat_k

The budget unit is program executions (prior runs, replays, and proposal
draws all count one), so engines can be compared on equal terms.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .allocator import SlpUtility, UtilityInputs, p_hat, tau_hat, utilities
from .dists import NEG_INF, Support, log_sum_exp
from .interp import ExecutionMeter, Program, base_address, run_replay
from .localinfer import (
    EmpiricalMeasure,
    EmptyMeasureError,
    KernelParams,
    Particle,
    estimate_pi_k,
    local_round,
    pimais_round,
    weight_summary,
)
from .registry import (
    ACTIVE,
    DISCOVERED,
    OVERFLOW,
    Registry,
    SlpRecord,
    init_discovery,
    overflow_refresh,
    promote_eligible,
    record_proposal,
    warm_up,
)
from .trace import path_digest, path_of

__all__ = [
    "DccConfig",
    "DccResult",
    "SlpSummary",
    "EngineError",
    "NoMassError",
    "run_dcc",
    "combine",
    "path_posterior",
    "expectation",
    "lppd",
]


class EngineError(RuntimeError):
    pass


class NoMassError(EngineError):
    """Every path estimate is zero; there is nothing to combine."""


@dataclass(frozen=True)
class DccConfig:
    """All run hyperparameters.  The budget is in program executions."""

    budget: int = 10_000
    t0: int = 100              # forward discovery runs
    t_init: int = 20           # greedy burn-in steps per chain at activation
    c0_base: int = 3           # base promotion threshold
    active_cap: int = 50
    n_chains: int = 10
    m_per_chain: int = 10      # IS draws per chain per round
    delta: float = 0.5
    beta: float = 1.0
    kappa: float = 1.0
    t_a: int = 100
    p_prior: float = 0.5
    rw_scale: float = 0.5
    pimais_scale: float = 1.0
    split_walk_scale: float = 2.0  # discrete walk width of global proposals
    global_fan_out: int = 1        # global proposals per iteration
    pi_mode: str = "mcmc"          # "mcmc" or "is"
    n_thresh: Optional[int] = None
    seed: int = 0
    refresh_prob: float = 0.01     # chance of one non-active inference round
    steps_per_chain: int = 1       # MwG sweeps per allocation
    log_utilities: bool = False

    def __post_init__(self):
        if self.budget < 0 or self.t0 < 1 or self.t_init < 0:
            raise ValueError("budget/t0/t_init out of range")
        if self.n_chains < 1 or self.m_per_chain < 1 or self.steps_per_chain < 0:
            raise ValueError("n_chains/m_per_chain/steps_per_chain out of range")
        if not 0.0 <= self.delta <= 1.0 or self.beta <= 0 or self.kappa < 0 or self.t_a < 1:
            raise ValueError("delta/beta/kappa/t_a out of range")
        if not 0.0 <= self.p_prior <= 1.0 or not 0.0 <= self.refresh_prob <= 1.0:
            raise ValueError("p_prior/refresh_prob out of range")
        if self.pi_mode not in ("mcmc", "is"):
            raise ValueError(f"pi_mode must be 'mcmc' or 'is', got {self.pi_mode!r}")


@dataclass(frozen=True)
class SlpSummary:
    id: int
    path: Optional[tuple]
    status: str
    C: int
    S: int
    log_z: float
    n_weights: int
    best_log_gamma: float
    example_output: Any


@dataclass
class DccResult:
    log_z: float
    measure: EmpiricalMeasure
    slps: list
    iterations: list
    config: DccConfig
    n_executions: int

    def to_json_text(self) -> str:
        """Canonical serialization; identical runs produce identical bytes."""
        payload = {
            "config": asdict(self.config),
            "log_z": repr(self.log_z),
            "n_executions": self.n_executions,
            "slps": [
                {
                    "id": s.id,
                    "path": None if s.path is None else [list(map(repr, a)) for a in s.path],
                    "status": s.status,
                    "C": s.C,
                    "S": s.S,
                    "log_z": repr(s.log_z),
                    "n_weights": s.n_weights,
                }
                for s in self.slps
            ],
            "iterations": [
                {k: (repr(v) if isinstance(v, float) else v) for k, v in it.items()}
                for it in self.iterations
            ],
            "measure_digest": self.measure_digest(),
        }
        return json.dumps(payload, sort_keys=True)

    def measure_digest(self) -> str:
        h = hashlib.sha1()
        for p in self.measure.particles:
            h.update(repr((p.values, p.output, p.weight)).encode())
        return h.hexdigest()


def _summaries(registry: Registry) -> list:
    out = []
    for r in registry.records:
        example = None
        if r.mcmc_samples:
            example = r.mcmc_samples[-1][1]
        elif r.is_particles:
            example = r.is_particles[-1][1]
        elif r.seed_trace is not None:
            example = r.seed_trace.return_value
        out.append(
            SlpSummary(
                id=r.id,
                path=r.path,
                status=r.status,
                C=r.C,
                S=r.S,
                log_z=r.zstats.log_z,
                n_weights=r.zstats.count,
                best_log_gamma=r.best_log_gamma,
                example_output=example,
            )
        )
    return out


def _utility_inputs(registry: Registry, config: DccConfig) -> UtilityInputs:
    log_w_th = registry.max_log_w()
    entries = []
    for r in registry.active_records():
        ws = weight_summary(r.zstats)
        if ws is None:
            entries.append(SlpUtility(r.id, r.S, NEG_INF, 1.0))
        else:
            entries.append(
                SlpUtility(
                    r.id,
                    r.S,
                    tau_hat(ws.log_z, ws.log_sigma2, config.kappa),
                    p_hat(ws.psi_mean, ws.psi_std, log_w_th, config.t_a),
                )
            )
    return UtilityInputs(entries, config.delta, config.beta)


def _global_explore(registry: Registry, rec: SlpRecord, program: Program,
                    config: DccConfig, rng, meter: ExecutionMeter):
    """Propose one trace move from a chain of the selected record and feed
    the resulting path to the registry (no accept step: discovery only).

    Split-marked sites are preferred as proposal targets since they are the
    declared path-determining variables; integer sites mix a prior resample
    with a rounded-Gaussian walk so neighbouring paths of a good one get
    proposed even when the prior puts negligible mass there.
    """
    chains = rec.chains
    if not chains:
        return
    for _ in range(config.global_fan_out):
        chain = chains[int(rng.integers(len(chains)))]
        trace = chain.trace
        draws = trace.draws
        if not draws:
            continue
        split_pos = [i for i, d in enumerate(draws) if d.address.split_value is not None]
        pool = split_pos if split_pos else range(len(draws))
        pos = pool[int(rng.integers(len(pool)))]
        d = draws[pos]
        sup = d.dist.support
        if sup is Support.INTEGER:
            if rng.random() < 0.5:
                v2 = d.dist.sample(rng)
            else:
                delta = int(round(rng.normal(0.0, config.split_walk_scale)))
                if delta == 0:
                    delta = 1 if rng.random() < 0.5 else -1
                v2 = d.value + delta
                if v2 < 0:
                    continue
        elif sup is Support.INDEX:
            v2 = d.dist.sample(rng)
        else:
            if rng.random() < config.p_prior:
                v2 = d.dist.sample(rng)
            else:
                v2 = d.value + config.rw_scale * rng.standard_normal()
        store = chain.store()
        store[base_address(d.address)] = v2
        out = run_replay(program, store, rng, meter)
        record_proposal(registry, path_of(out.trace), out.trace)


def _warm_up_ids(registry, ids, program, config, meter, on_off_path):
    for rec_id in ids:
        warm_up(
            registry,
            rec_id,
            program,
            t_init=config.t_init,
            n_chains=config.n_chains,
            m_per_chain=config.m_per_chain,
            proposal_scale=config.pimais_scale,
            meter=meter,
            on_off_path=on_off_path,
        )


def _force_promote(registry: Registry) -> list:
    """Liveness fallback: with nothing active, activate the most-proposed
    discovered record so the loop can proceed."""
    candidates = [r for r in registry.records if r.status == DISCOVERED]
    if not candidates:
        return []
    best = max(candidates, key=lambda r: (r.C, -r.id))
    best.status = ACTIVE
    return [best.id]


def run_dcc(program: Program, config: DccConfig) -> DccResult:
    """Run the full engine on `program` under `config`; deterministic per seed."""
    meter = ExecutionMeter()
    root = np.random.SeedSequence(config.seed)
    disc_ss, reg_ss, loop_ss = root.spawn(3)
    disc_rng = np.random.default_rng(disc_ss)
    loop_rng = np.random.default_rng(loop_ss)
    kernel = KernelParams(p_prior=config.p_prior, rw_scale=config.rw_scale)

    registry = init_discovery(
        program,
        config.t0,
        disc_rng,
        meter=meter,
        c0_base=config.c0_base,
        active_cap=config.active_cap,
        n_thresh=config.n_thresh if config.n_thresh is not None else program.n_thresh,
        pi_mode=config.pi_mode,
        kernel_params=kernel,
        seed_seq=reg_ss,
    )
    if not registry.records:
        raise EngineError(f"no paths discovered for {program.name!r} after {config.t0} prior runs")

    def on_off_path(trace):
        record_proposal(registry, path_of(trace), trace)

    # initial estimates for everything already eligible
    promoted = promote_eligible(registry)
    if not registry.active_records():
        promoted += _force_promote(registry)
    _warm_up_ids(registry, promoted, program, config, meter, on_off_path)

    iterations = []
    t = 0
    while meter.count < config.budget:
        t += 1
        registry.iteration = t
        promoted = promote_eligible(registry)
        if not registry.active_records():
            promoted += _force_promote(registry)
        _warm_up_ids(registry, promoted, program, config, meter, on_off_path)

        inputs = _utility_inputs(registry, config)
        us = utilities(inputs)
        selected = max(sorted(us), key=lambda k: us[k])
        rec = registry.records[selected]

        local_round(
            rec, program, config.steps_per_chain, rec.rng, meter,
            on_off_path=on_off_path, retain=(rec.pi_mode == "mcmc"),
        )
        pimais_round(rec, program, config.m_per_chain, config.pimais_scale, rec.rng, meter)
        rec.S += 1

        _global_explore(registry, rec, program, config, loop_rng, meter)

        if loop_rng.random() < config.refresh_prob:
            _refresh_non_active(registry, program, config, loop_rng, meter, on_off_path)

        entry = {
            "iter": t,
            "slp_id": rec.id,
            "path_digest": path_digest(rec.path),
            "log_zk": rec.zstats.log_z,
            "log_z_overall": _overall_log_z(registry),
            "s_k": rec.S,
            "utility": us[selected] if math.isfinite(us[selected]) else None,
            "executions": meter.count,
        }
        if config.log_utilities:
            entry["utilities"] = {str(k): (v if math.isfinite(v) else None) for k, v in us.items()}
        iterations.append(entry)

    log_z, measure = combine(registry.records)
    return DccResult(
        log_z=log_z,
        measure=measure,
        slps=_summaries(registry),
        iterations=iterations,
        config=config,
        n_executions=meter.count,
    )


def _refresh_non_active(registry, program, config, rng, meter, on_off_path):
    """One inference round for a uniformly chosen non-active record, keeping
    every zero-mass-so-far path reachable (allocation floor)."""
    pool = registry.non_active_records()
    if registry.overflow is not None:
        pool = pool + [registry.overflow]
    if not pool:
        return
    rec = pool[int(rng.integers(len(pool)))]
    if rec.status == OVERFLOW:
        overflow_refresh(registry, program, config.n_chains * config.m_per_chain, rng, meter)
        return
    if not rec.chains:
        warm_up(
            registry, rec.id, program,
            t_init=config.t_init, n_chains=config.n_chains,
            m_per_chain=config.m_per_chain, proposal_scale=config.pimais_scale,
            meter=meter, on_off_path=on_off_path,
        )
        return
    local_round(rec, program, config.steps_per_chain, rec.rng, meter,
                on_off_path=on_off_path, retain=(rec.pi_mode == "mcmc"))
    pimais_round(rec, program, config.m_per_chain, config.pimais_scale, rec.rng, meter)


def _overall_log_z(registry: Registry) -> float:
    vals = [r.zstats.log_z for r in registry.records]
    if not vals:
        return NEG_INF
    return log_sum_exp(vals)


def combine(records: Sequence[SlpRecord]):
    """Merge per-path estimates: particle weights of each path's measure are
    rescaled by that path's share of the total marginal likelihood.

    Paths with a zero estimate contribute nothing.  Raises
    :class:`NoMassError` when every estimate is zero.
    """
    logs = [r.zstats.log_z for r in records]
    finite = [lz for lz in logs if lz > NEG_INF]
    if not finite:
        raise NoMassError("all marginal-likelihood estimates are zero")
    log_z = log_sum_exp(finite)
    particles = []
    for rec, lz in zip(records, logs):
        if lz == NEG_INF:
            continue
        share = math.exp(lz - log_z)
        try:
            m = estimate_pi_k(rec)
        except EmptyMeasureError:
            # nothing retained yet (e.g. warm-up only): fall back to the
            # current chain states as an unweighted sample set
            if rec.chains:
                m = EmpiricalMeasure.unweighted(
                    [(c.draw_values, c.trace.return_value) for c in rec.chains]
                )
            elif rec.seed_trace is not None:
                m = EmpiricalMeasure.unweighted(
                    [(rec.seed_trace.values(), rec.seed_trace.return_value)]
                )
            else:
                continue
        for p in m.particles:
            particles.append(Particle(p.values, p.output, share * p.weight))
    return log_z, EmpiricalMeasure(particles, "self-normalized")


def path_posterior(result: DccResult, predicate: Callable[[Optional[tuple], Any], bool]) -> float:
    """Posterior probability of a path property: the share of the total
    marginal likelihood carried by the paths satisfying `predicate`.

    The predicate receives (path, example_output); the overflow record is
    passed path=None.
    """
    num = []
    den = []
    for s in result.slps:
        if s.log_z == NEG_INF:
            continue
        den.append(s.log_z)
        if predicate(s.path, s.example_output):
            num.append(s.log_z)
    if not den:
        return 0.0
    if not num:
        return 0.0
    return math.exp(log_sum_exp(num) - log_sum_exp(den))


def expectation(result: DccResult, f: Callable[[tuple, Any], float]) -> float:
    """Weighted average of f(draw_values, output) under the combined measure."""
    return sum(p.weight * f(p.values, p.output) for p in result.measure.particles)


def lppd(result, log_pred: Callable[[Any, Particle], float], test_set: Sequence) -> float:
    """Log pointwise predictive density of `test_set`:
    sum_n log sum_i w_i * exp(log_pred(t_n, particle_i)).

    `result` may be a DccResult, a baseline result, or a bare measure.
    """
    measure = getattr(result, "measure", result)
    test_set = list(test_set)
    if not test_set:
        raise ValueError("lppd: empty test set")
    acc = np.full(len(test_set), NEG_INF)
    for p in measure.particles:
        if p.weight <= 0.0:
            continue
        lw = math.log(p.weight)
        row = np.array([log_pred(t, p) + lw for t in test_set])
        acc = np.logaddexp(acc, row)
    return float(acc.sum())
