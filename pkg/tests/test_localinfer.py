import math

import numpy as np
import pytest

from dcc.dists import Categorical, NEG_INF, Normal, UniformContinuous, log_sum_exp, normal_log_pdf
from dcc.interp import ExecutionMeter, Program, run_prior, strict_trace
from dcc.localinfer import (
    ChainState,
    EmpiricalMeasure,
    EmptyMeasureError,
    KernelParams,
    ZStats,
    estimate_pi_k,
    free_positions,
    local_mh_step,
    local_round,
    pimais_round,
    weight_summary,
)
from dcc.models import gmm_open, two_branch
from dcc.registry import SlpRecord
from dcc.trace import path_of


def rng(seed=0):
    return np.random.default_rng(seed)


def make_record(program, path, chain_values, pi_mode="is", seed=0, rec_id=0):
    rec = SlpRecord(id=rec_id, path=tuple(path), pi_mode=pi_mode, rng=rng(seed))
    for vals in chain_values:
        t = strict_trace(program, path, vals)
        assert t is not None
        rec.chains.append(ChainState(t, [0.5] * len(path)))
    return rec


def single_normal_program(obs=None):
    def fn(ctx):
        x = ctx.sample("x", Normal(0.0, 1.0))
        if obs is not None:
            ctx.observe(Normal(x, 1.0), obs)
        return x

    return Program("one-normal", fn)


# ----------------------------------------------------------------- MH step


def test_identity_proposal_accepted():
    # a degenerate discrete site can only propose its current value: ratio 1
    def fn(ctx):
        return ctx.sample("c", Categorical([1.0]))

    prog = Program("point", fn)
    t = run_prior(prog, rng(0))
    chain = ChainState(t)
    chain2, accepted, off = local_mh_step(chain, path_of(t), prog, KernelParams(), rng(1))
    assert accepted and off is None
    assert chain2.trace.values() == t.values()


def test_off_path_proposal_returns_excursion_and_keeps_chain():
    prog = two_branch(0.0)
    g = rng(2)
    t = None
    while t is None or t.return_value[0] >= -0.2:
        cand = run_prior(prog, g)
        t = cand if cand.return_value[0] < 0 else None
    path = path_of(t)
    chain = ChainState(t)
    params = KernelParams(p_prior=0.0, rw_scale=5.0)  # walks will cross zero
    saw_off = False
    for _ in range(200):
        chain2, accepted, off = local_mh_step(chain, path, prog, params, g)
        if off is not None:
            saw_off = True
            assert not accepted
            assert chain2.trace.values() == chain.trace.values()  # purity of rejection
            assert [a.site for a in path_of(off)] == ["x1", "x2pos", "x3"]
        chain = chain2
    assert saw_off


def test_stationary_moments_standard_normal():
    prog = single_normal_program()
    t = run_prior(prog, rng(0))
    path = path_of(t)
    chain = ChainState(t, [0.5])
    g = rng(3)
    n = 100_000
    xs = np.empty(n)
    for i in range(n):
        chain, _, _ = local_mh_step(chain, path, prog, KernelParams(), g)
        xs[i] = chain.trace.values()[0]
    # batch means standard errors to absorb autocorrelation
    batches = xs.reshape(100, -1).mean(axis=1)
    se_mean = batches.std(ddof=1) / math.sqrt(len(batches))
    assert abs(xs.mean() - 0.0) < 3 * se_mean
    var_batches = (xs ** 2).reshape(100, -1).mean(axis=1)
    se_var = var_batches.std(ddof=1) / math.sqrt(len(batches))
    assert abs(xs.var() - 1.0) < 3 * se_var


def test_detailed_balance_two_point_kernel():
    # two-state target: gamma(x) = prior(x) * N(1; x, 1); prior resample proposal
    prior = (0.4, 0.6)
    lik = [math.exp(normal_log_pdf(1.0, float(x), 1.0)) for x in (0, 1)]

    def fn(ctx):
        x = ctx.sample("x", Categorical(prior))
        ctx.observe(Normal(float(x), 1.0), 1.0)
        return x

    prog = Program("two-point", fn)
    # exact MH kernel under prior-resample proposals
    def accept(i, j):
        return min(1.0, lik[j] / lik[i])

    kernel = np.zeros((2, 2))
    for i in (0, 1):
        for j in (0, 1):
            if i != j:
                kernel[i, j] = prior[j] * accept(i, j)
        kernel[i, i] = 1.0 - kernel[i].sum()

    t = run_prior(prog, rng(0))
    chain = ChainState(t)
    path = path_of(t)
    g = rng(5)
    counts = np.zeros((2, 2))
    prev = chain.trace.values()[0]
    n = 30_000
    for _ in range(n):
        chain, _, _ = local_mh_step(chain, path, prog, KernelParams(), g)
        cur = chain.trace.values()[0]
        counts[prev, cur] += 1
        prev = cur
    for i in (0, 1):
        row_n = counts[i].sum()
        for j in (0, 1):
            p = kernel[i, j]
            se = math.sqrt(max(p * (1 - p), 1e-12) / row_n)
            assert abs(counts[i, j] / row_n - p) < 3 * se + 1e-9


def test_out_of_support_walk_is_rejected_cleanly():
    def fn(ctx):
        u = ctx.sample("u", UniformContinuous(0.0, 1.0))
        return u

    prog = Program("unit", fn)
    t = run_prior(prog, rng(0))
    chain = ChainState(t)
    params = KernelParams(p_prior=0.0, rw_scale=50.0)  # almost always out of [0, 1]
    g = rng(1)
    for _ in range(200):
        chain, _, off = local_mh_step(chain, path_of(t), prog, params, g)
        assert off is None
        assert 0.0 <= chain.trace.values()[0] <= 1.0


# ----------------------------------------------------------------- local_round


def test_local_round_step_audit_and_determinism():
    def fn(ctx):
        a = ctx.sample("a", Normal(0.0, 1.0))
        b = ctx.sample("b", Normal(a, 1.0))
        ctx.observe(Normal(b, 1.0), 0.5)
        return (a, b)

    prog = Program("pair", fn)
    t = run_prior(prog, rng(0))
    path = path_of(t)

    def run_once():
        rec = make_record(prog, path, [t.values(), t.values()], pi_mode="mcmc", seed=7)
        meter = ExecutionMeter()
        local_round(rec, prog, 3, rec.rng, meter)
        return meter.count, [c.trace.values() for c in rec.chains]

    count1, states1 = run_once()
    count2, states2 = run_once()
    assert count1 == 12  # 2 chains x 3 sweeps x 2 single-site steps
    assert count1 == count2
    assert states1 == states2  # bit-reproducible per seed


def test_local_round_zero_steps_keeps_chains():
    prog = single_normal_program(obs=1.0)
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values()], pi_mode="mcmc")
    meter = ExecutionMeter()
    local_round(rec, prog, 0, rec.rng, meter)
    assert meter.count == 0
    assert rec.chains[0].trace.values() == t.values()
    assert rec.mcmc_samples == []


def test_local_round_retains_snapshot_per_sweep():
    prog = single_normal_program(obs=1.0)
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values(), t.values()], pi_mode="mcmc")
    local_round(rec, prog, 4, rec.rng)
    assert len(rec.mcmc_samples) == 8  # per chain per sweep


def test_gmm_means_stay_in_prior_intervals():
    ys = [0.5, 0.6, 2.4, 2.5, 3.9, 4.0]
    prog = gmm_open(ys, rate=9.0, hi=5.0)
    g = rng(1)
    t = None
    while t is None:
        cand = run_prior(prog, g)
        if cand.return_value[0] == 5:
            t = cand
    path = path_of(t)
    rec = make_record(prog, path, [t.values()], pi_mode="mcmc", seed=3)
    local_round(rec, prog, 200, rec.rng)
    k = 5
    for i, mu in enumerate(rec.chains[0].trace.values()[1:]):
        lo, hi = 5.0 * i / k, 5.0 * (i + 1) / k
        assert lo <= mu <= hi


# ----------------------------------------------------------------- weights


def test_weight_summary_examples():
    z = ZStats()
    for w in (2.0, 2.0, 2.0):
        z.add(math.log(w))
    s = weight_summary(z)
    assert math.exp(s.log_z) == pytest.approx(2.0, abs=1e-12)
    assert s.log_sigma2 == NEG_INF  # zero variance, clamped

    z = ZStats()
    z.add(math.log(1.0))
    z.add(math.log(3.0))
    s = weight_summary(z)
    assert math.exp(s.log_z) == pytest.approx(2.0, abs=1e-12)
    assert math.exp(s.log_sigma2) == pytest.approx(1.0, abs=1e-9)
    assert s.max_log_w == pytest.approx(math.log(3.0))


def test_weight_summary_lognormal_moments():
    g = rng(11)
    z = ZStats()
    n = 10_000
    for lw in g.normal(0.0, 1.0, size=n):
        z.add(float(lw))
    s = weight_summary(z)
    assert math.exp(s.log_z) == pytest.approx(math.exp(0.5), rel=0.05)
    assert math.exp(s.log_sigma2) == pytest.approx(math.e * (math.e - 1.0), rel=0.10)
    assert s.psi_mean == pytest.approx(0.0, abs=0.05)
    assert s.psi_std == pytest.approx(1.0, abs=0.05)


def test_weight_summary_not_ready_and_all_zero():
    assert weight_summary(ZStats()) is None
    z = ZStats()
    z.add(NEG_INF)
    s = weight_summary(z)
    assert s.log_z == NEG_INF
    assert s.psi_mean is None


# ----------------------------------------------------------------- PI-MAIS


def test_pimais_perfect_proposal_gives_constant_weights():
    # target == proposal, scaled by c = N(2; 0, 1): every weight equals c
    v = 2.0
    log_c = normal_log_pdf(v, 0.0, 1.0)

    def fn(ctx):
        x = ctx.sample("x", Normal(0.0, 1.0))
        ctx.observe(Normal(0.0, 1.0), v)
        return x

    prog = Program("scaled-normal", fn)
    t = strict_trace(prog, (("x", 0, None),), (0.0,))
    path = path_of(t)
    rec = make_record(prog, path, [(0.0,)], pi_mode="is", seed=2)
    pimais_round(rec, prog, 50, 1.0, rec.rng)
    assert all(lw == pytest.approx(log_c, abs=1e-12) for lw in rec.last_round_log_ws)
    assert rec.zstats.log_z == pytest.approx(log_c, abs=1e-12)


def conjugate_fixture():
    y = 1.0

    def fn(ctx):
        x = ctx.sample("x", Normal(0.0, 1.0))
        ctx.observe(Normal(x, 1.0), y)
        return x

    prog = Program("conjugate", fn)
    log_z_true = normal_log_pdf(y, 0.0, math.sqrt(2.0))
    return prog, log_z_true


def test_pimais_conditionally_unbiased_for_fixed_centers():
    prog, log_z_true = conjugate_fixture()
    t = run_prior(prog, rng(0))
    path = path_of(t)
    rec = make_record(prog, path, [(0.3,), (0.9,)], pi_mode="mcmc", seed=4)
    per_round = []
    n_rounds = 2000
    for _ in range(n_rounds):
        pimais_round(rec, prog, 2, 1.0, rec.rng, retain=False)
        per_round.append(np.exp(rec.last_round_log_ws).mean())
    per_round = np.asarray(per_round)
    z_true = math.exp(log_z_true)
    se = per_round.std(ddof=1) / math.sqrt(n_rounds)
    assert abs(per_round.mean() - z_true) < 3 * se
    assert rec.zstats.log_z == pytest.approx(log_z_true, abs=0.05)


def test_pimais_far_centers_unbiased_but_noisier():
    prog, log_z_true = conjugate_fixture()
    z_true = math.exp(log_z_true)

    def run(centers, seed):
        rec = make_record(prog, path_of(run_prior(prog, rng(0))), centers, seed=seed)
        vals = []
        for _ in range(1500):
            pimais_round(rec, prog, 2, 1.0, rec.rng, retain=False)
            vals.append(np.exp(rec.last_round_log_ws).mean())
        return np.asarray(vals), rec

    near, rec_near = run([(0.3,), (0.8,)], seed=5)
    far, rec_far = run([(9.0,), (11.0,)], seed=6)  # ~10 sd from the mass
    se_far = far.std(ddof=1) / math.sqrt(len(far))
    assert abs(far.mean() - z_true) < 4 * se_far
    assert far.std() > 2.0 * near.std()
    s_near, s_far = weight_summary(rec_near.zstats), weight_summary(rec_far.zstats)
    assert s_far.log_sigma2 > s_near.log_sigma2


def test_pimais_off_path_draws_count_with_zero_weight():
    prog = two_branch(0.0)
    g = rng(4)
    t = None
    while t is None:
        cand = run_prior(prog, g)
        if cand.return_value[0] < 0 and cand.return_value[0] > -0.5:
            t = cand
    rec = make_record(prog, path_of(t), [t.values()], seed=8)
    pimais_round(rec, prog, 200, 2.0, rec.rng, retain=False)
    assert rec.zstats.count == 200
    assert any(lw == NEG_INF for lw in rec.last_round_log_ws)  # sign flips score zero
    assert rec.zstats.log_z < rec.zstats.log_sum_w  # zeros still dilute the mean


def test_self_normalisation_constant_identity():
    prog, _ = conjugate_fixture()
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [(0.2,), (0.7,)], pi_mode="is", seed=9)
    for _ in range(5):
        pimais_round(rec, prog, 4, 1.0, rec.rng)
    total = log_sum_exp([lw for (_, _, lw) in rec.is_particles])
    assert total == pytest.approx(rec.zstats.log_z + math.log(rec.zstats.count), abs=1e-9)


# ----------------------------------------------------------------- pi_k estimates


def test_estimate_single_sample_point_mass():
    prog = single_normal_program()
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values()], pi_mode="mcmc")
    rec.mcmc_samples.append((t.values(), t.return_value))
    m = estimate_pi_k(rec)
    assert len(m.particles) == 1
    assert m.particles[0].weight == 1.0


def test_estimate_equal_weights_matches_unweighted():
    prog = single_normal_program()
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values()], pi_mode="is")
    for v in (0.1, 0.2, 0.3, 0.4):
        rec.is_particles.append(((v,), v, -1.25))
    m = estimate_pi_k(rec)
    for p in m.particles:
        assert p.weight == pytest.approx(0.25, abs=1e-12)
    assert m.total_weight() == pytest.approx(1.0, abs=1e-9)


def test_estimate_empty_raises():
    prog = single_normal_program()
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values()], pi_mode="mcmc")
    with pytest.raises(EmptyMeasureError):
        estimate_pi_k(rec)


def test_estimate_conjugate_posterior_mean():
    prog, _ = conjugate_fixture()  # posterior N(0.5, 1/2)
    t = run_prior(prog, rng(0))
    rec = make_record(prog, path_of(t), [t.values(), t.values()], pi_mode="mcmc", seed=10)
    local_round(rec, prog, 2000, rec.rng)
    m = estimate_pi_k(rec)
    xs = np.array([p.values[0] for p in m.particles])
    se = xs.std(ddof=1) / math.sqrt(len(xs) / 20.0)  # crude autocorrelation allowance
    assert abs(xs.mean() - 0.5) < 3 * se
