import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcc.dists import Categorical, NEG_INF, Normal, Poisson, normal_log_pdf
from dcc.interp import ExecutionMeter, Program, run_prior
from dcc.models import ModelSpec, build_model, gen_data, two_branch
from dcc.registry import (
    ACTIVE,
    DISCOVERED,
    EVICTED,
    Registry,
    SlpRecord,
    init_discovery,
    promote_eligible,
    record_proposal,
    registry_report,
    warm_up,
)
from dcc.trace import Address, path_of


def rng(seed=0):
    return np.random.default_rng(seed)


def geometric_loop_program():
    def fn(ctx):
        n = 0
        while ctx.sample("flip", Categorical([0.5, 0.5])) == 0:
            n += 1
        return n

    return Program("geometric", fn, n_thresh=5)


# ----------------------------------------------------------------- discovery


def test_two_branch_discovery_finds_both_paths():
    reg = init_discovery(two_branch(0.0), 100, rng(0))
    real = [r for r in reg.records if r.path is not None]
    assert len(real) == 2
    assert sum(r.C for r in real) == 100
    assert all(r.status == DISCOVERED for r in real)


def test_discovery_hits_match_poisson_prior():
    spec = ModelSpec("gmm-open", data_seed=0)
    prog = build_model(spec, gen_data(spec))
    reg = init_discovery(prog, 100, rng(1))
    ks = [r.path[0].split_value + 1 for r in reg.records if r.path]
    assert all(1 <= k <= 28 for k in ks)  # within 9 +/- ~3 sd of Poisson(9)+1
    heaviest = max((r for r in reg.records if r.path), key=lambda r: r.C)
    assert abs(heaviest.path[0].split_value + 1 - 10) <= 4


def test_discovery_t0_one():
    reg = init_discovery(two_branch(0.0), 1, rng(2))
    real = [r for r in reg.records if r.path is not None]
    assert len(real) == 1
    assert real[0].C == 1


def test_discovery_requires_positive_t0():
    with pytest.raises(ValueError):
        init_discovery(two_branch(0.0), 0, rng(0))


def test_both_slps_found_statistically():
    # discovery reliability: both paths present in 100/100 seeded runs at t0=50
    for seed in range(100):
        reg = init_discovery(two_branch(0.0), 50, rng(seed))
        assert len([r for r in reg.records if r.path is not None]) == 2


# ----------------------------------------------------------------- proposals


def test_record_proposal_new_and_repeat():
    prog = two_branch(0.0)
    reg = init_discovery(prog, 1, rng(3))
    t = run_prior(prog, rng(99))
    known = {r.path for r in reg.records if r.path is not None}
    is_new = path_of(t) not in known
    assert record_proposal(reg, path_of(t), t) is is_new
    rec = reg.by_path[path_of(t)]
    c_before = rec.C
    assert record_proposal(reg, path_of(t), t) is False
    assert rec.C == c_before + 1


def test_overflow_routing_for_long_paths():
    prog = geometric_loop_program()
    reg = init_discovery(prog, 200, rng(4))
    assert reg.overflow is not None
    assert reg.overflow.C >= 1          # some runs exceed 5 draws
    assert reg.overflow.path is None
    short = [r for r in reg.records if r.path is not None]
    assert all(len(r.path) <= 5 for r in short)
    # the overflow prior-IS average counts every discovery run
    assert reg.overflow.zstats.count == 200


def test_seed_trace_keeps_best_log_gamma():
    prog = two_branch(0.0)
    reg = init_discovery(prog, 50, rng(5))
    g = rng(6)
    for _ in range(100):
        t = run_prior(prog, g)
        record_proposal(reg, path_of(t), t)
    for r in reg.records:
        if r.path is not None:
            assert r.seed_trace.log_gamma == r.best_log_gamma


# ----------------------------------------------------------------- promotion


def make_registry_with(counts, gammas=None, cap=50):
    reg = Registry(c0_base=3, active_cap=cap)
    for i, c in enumerate(counts):
        rec = reg._new_record((Address(f"s{i}", 0),), DISCOVERED)
        rec.C = c
        rec.best_log_gamma = gammas[i] if gammas else -float(i)
    return reg


def test_promotion_threshold():
    reg = make_registry_with([3, 2])
    promoted = promote_eligible(reg)
    assert promoted == [0]
    assert reg.records[0].status == ACTIVE
    assert reg.records[1].status == DISCOVERED


def test_promotion_threshold_grows_with_iterations():
    reg = make_registry_with([3, 3])
    reg.iteration = 3000
    assert reg.c0() == 9
    assert promote_eligible(reg) == []


def test_eviction_of_weakest_at_cap():
    reg = make_registry_with([5] * 11, gammas=[-10.0 * (11 - i) for i in range(11)], cap=10)
    # activate the first ten
    for r in reg.records[:10]:
        r.status = ACTIVE
    newcomer = reg.records[10]
    promoted = promote_eligible(reg)
    assert promoted == [newcomer.id]
    # record 0 has the smallest best log gamma: evicted
    assert reg.records[0].status == EVICTED
    assert sum(1 for r in reg.records if r.status == ACTIVE) == 10
    # eviction never removes knowledge
    assert len(reg.records) == 11


def test_discovery_is_monotone_under_eviction():
    reg = make_registry_with([5, 5], cap=1)
    promote_eligible(reg)
    paths_before = {r.path for r in reg.records}
    promote_eligible(reg)
    assert {r.path for r in reg.records} == paths_before


@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 2)), min_size=1, max_size=40))
@settings(max_examples=200, deadline=None)
def test_no_duplicate_paths_property(sites):
    prog = two_branch(0.0)
    reg = init_discovery(prog, 1, rng(0))
    g = rng(1)
    for chunk in range(0, len(sites), 4):
        t = run_prior(prog, g)
        record_proposal(reg, path_of(t), t)
    paths = [r.path for r in reg.records if r.path is not None]
    assert len(paths) == len(set(paths))


# ----------------------------------------------------------------- warm-up


def warmable_registry(program, t0=60, seed=7):
    reg = init_discovery(program, t0, rng(seed))
    return reg


def test_warm_up_t_init_zero_keeps_seed():
    prog = two_branch(0.0)
    reg = warmable_registry(prog)
    rec = next(r for r in reg.records if r.path is not None)
    warm_up(reg, rec.id, prog, t_init=0, n_chains=3, m_per_chain=2, proposal_scale=1.0)
    assert len(rec.chains) == 3
    for chain in rec.chains:
        assert chain.trace.values() == rec.seed_trace.values()
    assert rec.zstats.count == 6  # one IS round seeds the estimate


def test_warm_up_greedy_never_decreases_log_gamma():
    prog = two_branch(0.0)
    reg = warmable_registry(prog, seed=8)
    rec = next(r for r in reg.records if r.path is not None)
    seed_lg = rec.seed_trace.log_gamma
    warm_up(reg, rec.id, prog, t_init=25, n_chains=4, m_per_chain=2, proposal_scale=1.0)
    for chain in rec.chains:
        assert chain.trace.log_gamma >= seed_lg


def test_warm_up_reaches_positive_branch_mode():
    # grid-search oracle for the argmax of the 3-draw branch density at y1=0
    def neg_density(x1, x2, x3):
        return (
            normal_log_pdf(x1, 0.0, 2.0)
            + normal_log_pdf(x2, 5.0, 2.0)
            + normal_log_pdf(x3, x2, 2.0)
            + normal_log_pdf(0.0, x3, 2.0)
        )

    grid = np.linspace(-1.0, 8.0, 181)
    best, best_val = None, -np.inf
    for x2 in grid:
        for x3 in grid:
            v = neg_density(0.0, x2, x3)  # x1 sits at its boundary optimum 0
            if v > best_val:
                best, best_val = (0.0, x2, x3), v

    prog = two_branch(0.0)
    reg = warmable_registry(prog, seed=9)
    rec = next(
        r for r in reg.records if r.path is not None and len(r.path) == 3
    )
    warm_up(reg, rec.id, prog, t_init=60, n_chains=4, m_per_chain=2, proposal_scale=1.0)
    top = max(rec.chains, key=lambda c: c.trace.log_gamma)
    assert abs(top.trace.values()[1] - best[1]) < 1.2
    assert abs(top.trace.values()[2] - best[2]) < 1.2
    assert top.trace.log_gamma > best_val - 3.0


def test_registry_report_lists_every_record():
    prog = two_branch(0.0)
    reg = init_discovery(prog, 40, rng(10))
    text = registry_report(reg.records)
    lines = text.splitlines()
    assert len(lines) == 1 + len(reg.records)
    assert "status" in lines[0]
    assert all("discovered" in line for line in lines[1:])
