"""Trace-based probabilistic programming with divide/conquer/combine inference.

Models are plain Python procedures written against an effect context
(``ctx.sample(site, dist, split=False)`` / ``ctx.observe(dist, value)``).
The engine partitions a model into its straight-line paths, runs per-path
MwG chains with a chain-centered adaptive-IS marginal-likelihood
estimator, allocates compute across paths with a bandit-style utility,
and combines the per-path estimates into one posterior.
"""

from .allocator import UtilityInputs, SlpUtility, p_hat, select_slp, tau_hat
from .baselines import BaselineResult, run_is, run_rmh
from .dists import (
    Categorical,
    GmmObsLik,
    Normal,
    ParameterError,
    Poisson,
    UniformContinuous,
    UnsupportedSampleError,
    gmm_obs_log_lik,
    log_density,
    log_sum_exp,
    sample,
)
from .engine import (
    DccConfig,
    DccResult,
    EngineError,
    NoMassError,
    combine,
    expectation,
    lppd,
    path_posterior,
    run_dcc,
)
from .interp import (
    ExecutionMeter,
    ModelError,
    Program,
    draw_store,
    run_prior,
    run_replay,
    score_trace,
)
from .localinfer import (
    ChainState,
    EmpiricalMeasure,
    EmptyMeasureError,
    KernelParams,
    Particle,
    ZStats,
    estimate_pi_k,
    local_mh_step,
    local_round,
    pimais_round,
    weight_summary,
)
from .models import ModelSpec, build_model, gen_data
from .registry import (
    Registry,
    SlpRecord,
    init_discovery,
    promote_eligible,
    record_proposal,
    registry_report,
    warm_up,
)
from .trace import Address, Trace, log_gamma_k, path_of, trace_record

__all__ = [name for name in dir() if not name.startswith("_")]
