"""Per-path inference: single-site MwG chains and the chain-centered
adaptive importance sampling estimator of the path's marginal likelihood.

The MwG kernel proposes at one uniformly chosen non-split draw: a mixture
of a prior resample and a symmetric Gaussian random walk for continuous
sites, a prior resample for discrete sites.  Proposals whose replay leaves
the chain's path are rejected locally and handed back so the caller can
register the newly visited path.

The marginal-likelihood estimator draws, per round, M samples from a
proposal centered on each of the N current chain states and weights them
against the mixture of all N components (Rao-Blackwellised over
components):

    w = gamma_path(x) / [ (1/N) sum_n q_n(x) ]

Averaging all weights ever drawn for the path gives its running Z-hat;
values proposed off the path score gamma = 0 and enter with weight 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, NamedTuple, Optional

from scipy.special import ndtr, ndtri

from .dists import NEG_INF, Support, log_sum_exp, normal_log_pdf
from .interp import _PathDeparture, _Context, _execute, base_address, run_replay
from .trace import path_of

__all__ = [
    "ChainState",
    "KernelParams",
    "ZStats",
    "WeightSummary",
    "Particle",
    "EmpiricalMeasure",
    "EmptyMeasureError",
    "local_mh_step",
    "local_round",
    "pimais_round",
    "estimate_pi_k",
    "weight_summary",
]


def log_add_exp(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@dataclass(frozen=True)
class KernelParams:
    """Single-site proposal settings for MwG / RMH moves."""

    p_prior: float = 0.5     # probability of a prior resample at continuous sites
    rw_scale: float = 0.5    # random-walk std at continuous sites
    greedy: bool = False     # accept only strict log-gamma increases (warm-up)
    adapt: bool = False      # Robbins-Monro scale adaptation (off by default;
                             # leave off for rounds feeding the Z estimator)


class ChainState:
    """One MwG chain: its current trace on the path, plus per-site scales."""

    __slots__ = ("trace", "scales", "n_updates")

    def __init__(self, trace, scales=None, n_updates=0):
        self.trace = trace
        self.scales = scales
        self.n_updates = n_updates

    @property
    def log_gamma(self) -> float:
        return self.trace.log_gamma

    @property
    def draw_values(self) -> tuple:
        return self.trace.values()

    def store(self) -> dict:
        return {base_address(d.address): d.value for d in self.trace.draws}


def free_positions(path) -> tuple:
    """Draw positions local inference may update: the non-split ones."""
    return tuple(i for i, a in enumerate(path) if a.split_value is None)


def _mixture_log_q(dist, frm: float, to: float, p_prior: float, rw_scale: float) -> float:
    lp = dist.log_density(to)
    if p_prior >= 1.0:
        return lp
    lw = normal_log_pdf(to, frm, rw_scale)
    if p_prior <= 0.0:
        return lw
    return log_add_exp(math.log(p_prior) + lp, math.log1p(-p_prior) + lw)


def propose_site_value(dist, value, params: KernelParams, rng, scale=None):
    """Propose a new value at one site; returns (value', log q_fwd, log q_rev)."""
    if dist.support is Support.CONTINUOUS:
        s = scale if scale is not None else params.rw_scale
        if rng.random() < params.p_prior:
            v2 = dist.sample(rng)
        else:
            v2 = value + s * rng.standard_normal()
        return (
            v2,
            _mixture_log_q(dist, value, v2, params.p_prior, s),
            _mixture_log_q(dist, v2, value, params.p_prior, s),
        )
    # discrete sites: prior resample only
    v2 = dist.sample(rng)
    return v2, dist.log_density(v2), dist.log_density(value)


def mh_log_alpha(old_trace, new_trace, log_q_fwd, log_q_rev, fresh_addrs, n_free_old=None, n_free_new=None):
    """Log acceptance ratio of a single-site trace move.

    Includes the proposal terms of the chosen site, the prior terms of
    draws freshly sampled in the new trace (forward proposal) and of old
    draws absent from it (reverse proposal), and, when given, the change in
    the number of selectable sites.
    """
    if new_trace.log_gamma == NEG_INF:
        return NEG_INF
    if old_trace.log_gamma == NEG_INF:
        return math.inf
    new_bases = {base_address(d.address) for d in new_trace.draws}
    unused_lp = sum(
        d.log_prior for d in old_trace.draws if base_address(d.address) not in new_bases
    )
    fresh = set(fresh_addrs)
    fresh_lp = sum(d.log_prior for d in new_trace.draws if d.address in fresh)
    log_alpha = (
        new_trace.log_gamma
        - old_trace.log_gamma
        + log_q_rev
        - log_q_fwd
        + unused_lp
        - fresh_lp
    )
    if n_free_old is not None and n_free_old != n_free_new:
        log_alpha += math.log(n_free_old) - math.log(n_free_new)
    return log_alpha


def local_mh_step(chain: ChainState, slp_path, program, params: KernelParams, rng,
                  meter=None, free=None):
    """One single-site MwG update restricted to `slp_path`.

    Returns (chain', accepted, off_path_trace).  Proposals that leave the
    path are rejected without touching the chain and the excursion trace is
    returned for discovery.
    """
    if free is None:
        free = free_positions(slp_path)
    if not free:
        return chain, False, None
    pos = free[int(rng.integers(len(free)))]
    draw = chain.trace.draws[pos]
    scale = chain.scales[pos] if chain.scales is not None else None
    v2, lq_fwd, lq_rev = propose_site_value(draw.dist, draw.value, params, rng, scale)
    if draw.dist.log_density(v2) == NEG_INF:
        # outside the prior support: gamma' is zero, and replaying would
        # silently redraw the site; reject here instead
        return ChainState(chain.trace, chain.scales, chain.n_updates + 1), False, None
    store = chain.store()
    store[base_address(draw.address)] = v2
    outcome = run_replay(program, store, rng, meter)
    new_trace = outcome.trace
    if path_of(new_trace) != slp_path:
        return chain, False, new_trace
    if params.greedy:
        accepted = new_trace.log_gamma > chain.trace.log_gamma
    else:
        log_alpha = mh_log_alpha(chain.trace, new_trace, lq_fwd, lq_rev, outcome.fresh)
        accepted = log_alpha >= 0.0 or math.log(rng.random()) < log_alpha
    scales = chain.scales
    if params.adapt and scales is not None and draw.dist.support is Support.CONTINUOUS:
        step = (1.0 if accepted else 0.0) - 0.44
        scales = list(scales)
        scales[pos] = max(1e-3, scales[pos] * math.exp(step / math.sqrt(10 + chain.n_updates)))
    if accepted:
        return ChainState(new_trace, scales, chain.n_updates + 1), True, None
    return ChainState(chain.trace, scales, chain.n_updates + 1), False, None


def local_round(record, program, steps_per_chain: int, rng, meter=None,
                on_off_path=None, params: Optional[KernelParams] = None,
                retain: bool = True):
    """Advance every chain of the record by `steps_per_chain` MwG sweeps.

    A sweep is n_x single-site updates (sites drawn uniformly among the
    non-split positions).  One state snapshot per chain per sweep is
    retained for the MCMC-mode posterior estimate.  Off-path excursions are
    forwarded to `on_off_path`.
    """
    path = record.path
    params = params if params is not None else record.kernel_params
    free = free_positions(path)
    n_steps = steps_per_chain * len(path)
    for idx, chain in enumerate(record.chains):
        for s in range(n_steps):
            chain, _, off = local_mh_step(chain, path, program, params, rng, meter, free)
            if off is not None and on_off_path is not None:
                on_off_path(off)
            if retain and free and (s + 1) % len(path) == 0:
                record.mcmc_samples.append((chain.draw_values, chain.trace.return_value))
        if retain and not free and steps_per_chain > 0:
            record.mcmc_samples.append((chain.draw_values, chain.trace.return_value))
        record.chains[idx] = chain
    return record


@dataclass
class ZStats:
    """Streaming accumulator for importance weights, all in log space."""

    count: int = 0
    log_sum_w: float = NEG_INF
    log_sum_w2: float = NEG_INF
    max_log_w: float = NEG_INF
    n_finite: int = 0
    sum_lw: float = 0.0
    sum_lw2: float = 0.0

    def add(self, log_w: float):
        self.count += 1
        if log_w == NEG_INF:
            return
        self.log_sum_w = log_add_exp(self.log_sum_w, log_w)
        self.log_sum_w2 = log_add_exp(self.log_sum_w2, 2.0 * log_w)
        if log_w > self.max_log_w:
            self.max_log_w = log_w
        self.n_finite += 1
        self.sum_lw += log_w
        self.sum_lw2 += log_w * log_w

    @property
    def log_z(self) -> float:
        if self.count == 0:
            return NEG_INF
        return self.log_sum_w - math.log(self.count)


class WeightSummary(NamedTuple):
    log_z: float
    log_sigma2: float          # log of the population variance of the weights
    psi_mean: Optional[float]  # normal fit to the finite log-weights
    psi_std: Optional[float]
    max_log_w: float


def weight_summary(zstats: ZStats) -> Optional[WeightSummary]:
    """Summaries the allocator needs; None while no weight has been collected."""
    if zstats.count == 0:
        return None
    log_z = zstats.log_z
    if zstats.count < 2 or zstats.log_sum_w2 == NEG_INF:
        log_sigma2 = NEG_INF
    else:
        a = zstats.log_sum_w2 - math.log(zstats.count)
        b = 2.0 * log_z
        # var = E[w^2] - E[w]^2, clamped at zero when rounding makes it negative
        log_sigma2 = a + math.log1p(-math.exp(b - a)) if a > b else NEG_INF
    if zstats.n_finite == 0:
        psi_mean = psi_std = None
    else:
        psi_mean = zstats.sum_lw / zstats.n_finite
        var = max(0.0, zstats.sum_lw2 / zstats.n_finite - psi_mean * psi_mean)
        psi_std = math.sqrt(var)
    return WeightSummary(log_z, log_sigma2, psi_mean, psi_std, zstats.max_log_w)


_LOG_HALF = math.log(0.5)
_MIN_TRUNC_MASS = 1e-12


def _trunc_consts(c: float, s: float, lo: float, hi: float):
    """(phi_lo, mass) of N(c, s) restricted to [lo, hi]."""
    phi_lo = float(ndtr((lo - c) / s)) if lo != NEG_INF else 0.0
    phi_hi = float(ndtr((hi - c) / s)) if hi != math.inf else 1.0
    return phi_lo, phi_hi - phi_lo


def _local_component_log_pdf(x: float, c: float, s: float, lo: float, hi: float,
                             prior_lp: float) -> float:
    """Log density of the support-truncated local proposal component.

    Degenerates to the site's prior when the truncated mass vanishes (the
    sampler makes the same switch, keeping sampling and density aligned).
    """
    if lo == NEG_INF and hi == math.inf:
        return normal_log_pdf(x, c, s)
    _, mass = _trunc_consts(c, s, lo, hi)
    if mass < _MIN_TRUNC_MASS:
        return prior_lp
    return normal_log_pdf(x, c, s) - math.log(mass)


class _ProposalContext(_Context):
    """Execute the program while proposing values along a fixed path.

    Continuous non-split sites draw from an equal mixture of the site's own
    prior and a N(center, scale_i) truncated to the site's support (the
    defensive prior component bounds the weights when a chain's spread
    misjudges the target width; the truncation keeps long paths from losing
    all their proposals to a single out-of-support coordinate).  Discrete
    non-split sites draw from their prior with the density folded into
    log_q_disc; split sites are pinned to the path value.  Departure from
    the path aborts the execution.
    """

    __slots__ = ("path", "center", "scales", "rng", "pos", "log_q_disc", "proposed")

    def __init__(self, path, center, scales, rng):
        super().__init__()
        self.path = path
        self.center = center
        self.scales = scales  # {position: proposal std} for continuous sites
        self.rng = rng
        self.pos = 0
        self.log_q_disc = 0.0
        self.proposed = []

    def sample(self, site: str, dist, split: bool = False):
        if self.pos >= len(self.path):
            raise _PathDeparture
        expected = self.path[self.pos]
        occ = self._site_counts.get(site, 0)
        if site != expected.site or occ != expected.occurrence:
            raise _PathDeparture
        if expected.split_value is not None:
            value = expected.split_value
        elif dist.support is Support.CONTINUOUS:
            if self.rng.random() < 0.5:
                value = self._local_draw(dist)
            else:
                value = dist.sample(self.rng)
        else:
            value = dist.sample(self.rng)
            self.log_q_disc += dist.log_density(value)
        addr = self._next_address(site, split, value)
        if addr != expected:
            raise _PathDeparture
        self.pos += 1
        self.proposed.append(value)
        self._record(addr, value, dist)
        return value

    def _local_draw(self, dist):
        c = self.center[self.pos]
        s = self.scales[self.pos]
        lo, hi = dist.bounds()
        if lo == NEG_INF and hi == math.inf:
            return c + s * self.rng.standard_normal()
        phi_lo, mass = _trunc_consts(c, s, lo, hi)
        if mass < _MIN_TRUNC_MASS:
            return dist.sample(self.rng)
        value = c + s * float(ndtri(phi_lo + mass * self.rng.random()))
        return min(max(value, lo), hi)


def _proposal_scales(centers, cont, base_scale: float) -> dict:
    """Per-coordinate proposal stds from the chain ensemble spread.

    A coordinate whose centers all coincide (single chain, or chains not
    yet dispersed) falls back to the base scale outright.
    """
    scales = {}
    n = len(centers)
    for i in cont:
        mean = sum(c[i] for c in centers) / n
        var = sum((c[i] - mean) ** 2 for c in centers) / n
        spread = math.sqrt(var)
        scales[i] = base_scale * spread if spread > 0.0 else base_scale
    return scales


def pimais_round(record, program, m_per_chain: int, proposal_scale: float, rng,
                 meter=None, retain: Optional[bool] = None) -> ZStats:
    """One adaptive-IS round: M draws per chain, weighted against the
    N-component mixture of proposals centered on the current chain states:

        w = gamma(x) / [(1/N) sum_n prod_i (0.5 N(x_i; c_n_i, s_i) + 0.5 f_i(x_i))]

    (continuous coordinates; discrete ones contribute their prior).  Every
    draw, on-path or not, advances the weight count; the running Z-hat is
    the mean of all weights ever accumulated for this path.  Per-round
    log-weights are left on ``record.last_round_log_ws`` for diagnostics.
    """
    path = record.path
    chains = record.chains
    centers = [c.draw_values for c in chains]
    cont = [
        i
        for i, a in enumerate(path)
        if a.split_value is None
        and chains[0].trace.draws[i].dist.support is Support.CONTINUOUS
    ]
    scales = _proposal_scales(centers, cont, proposal_scale)
    n = len(chains)
    log_n = math.log(n)
    if retain is None:
        retain = record.pi_mode == "is"
    round_log_ws = []
    for center in centers:
        for _ in range(m_per_chain):
            ctx = _ProposalContext(path, center, scales, rng)
            try:
                trace = _execute(program, ctx, meter)
                ok = ctx.pos == len(path)
            except _PathDeparture:
                ok = False
            if not ok:
                record.zstats.add(NEG_INF)
                round_log_ws.append(NEG_INF)
                continue
            values = ctx.proposed
            if cont:
                comps = []
                for other in centers:
                    comp = 0.0
                    for i in cont:
                        d = trace.draws[i]
                        lo, hi = d.dist.bounds()
                        local_lp = _local_component_log_pdf(
                            values[i], other[i], scales[i], lo, hi, d.log_prior
                        )
                        comp += log_add_exp(_LOG_HALF + local_lp, _LOG_HALF + d.log_prior)
                    comps.append(comp)
                log_q = log_sum_exp(comps) - log_n + ctx.log_q_disc
            else:
                log_q = ctx.log_q_disc
            log_w = trace.log_gamma - log_q
            record.zstats.add(log_w)
            round_log_ws.append(log_w)
            if retain:
                record.is_particles.append((tuple(values), trace.return_value, log_w))
    record.last_round_log_ws = round_log_ws
    return record.zstats


class Particle(NamedTuple):
    values: tuple
    output: Any
    weight: float


class EmptyMeasureError(RuntimeError):
    """A posterior estimate was requested before any sample was retained."""


@dataclass
class EmpiricalMeasure:
    """Weighted or unweighted sample approximation of a density."""

    particles: list  # of Particle; weights sum to 1
    mode: str        # "unweighted" | "self-normalized"

    @staticmethod
    def unweighted(samples) -> "EmpiricalMeasure":
        samples = list(samples)
        if not samples:
            raise EmptyMeasureError("no samples retained")
        w = 1.0 / len(samples)
        return EmpiricalMeasure(
            [Particle(v, out, w) for v, out in samples], "unweighted"
        )

    @staticmethod
    def from_log_weights(entries) -> "EmpiricalMeasure":
        """entries: iterable of (values, output, log_weight); self-normalises."""
        entries = list(entries)
        if not entries:
            raise EmptyMeasureError("no weighted samples retained")
        log_ws = [e[2] for e in entries]
        total = log_sum_exp(log_ws)
        if total == NEG_INF:
            raise EmptyMeasureError("all weights are zero")
        return EmpiricalMeasure(
            [Particle(v, out, math.exp(lw - total)) for (v, out, lw) in entries],
            "self-normalized",
        )

    def total_weight(self) -> float:
        return sum(p.weight for p in self.particles)


def estimate_pi_k(record, mode: Optional[str] = None) -> EmpiricalMeasure:
    """Posterior estimate for one path: either the unweighted MCMC samples
    or the self-normalised adaptive-IS samples, per the configured mode."""
    mode = mode if mode is not None else record.pi_mode
    if mode == "mcmc":
        return EmpiricalMeasure.unweighted(record.mcmc_samples)
    if mode == "is":
        return EmpiricalMeasure.from_log_weights(record.is_particles)
    raise ValueError(f"unknown posterior mode {mode!r}")
