import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dappcpu.errors import OracleSizeError
from dappcpu.model import FrequencyLevels, PowerModelParams, SchedulingPlan
from dappcpu.oracle import (
    MAX_CORES,
    MAX_LEVELS,
    MAX_THREADS,
    CertRow,
    OracleInstance,
    brute_force_naive,
    brute_force_optimal,
    judge_plan,
    random_instance,
    run_certification,
    summarize,
)

LV = FrequencyLevels((1.0, 2.0))
PW = PowerModelParams(1.0, 1.0, 0.0)


def inst(n, cycles, levels=LV, power=PW, ctx=0):
    return OracleInstance(n, tuple(cycles), levels, power, 1e-3, ctx)


def test_single_thread_runs_at_lowest_sufficient_level():
    plan, energy = brute_force_optimal(inst(1, [500_000]))
    assert plan.freq == {0: 1.0}
    assert energy == pytest.approx((1 + 1) * 0.5)


def test_exact_fit_at_lowest_level_is_feasible():
    # 1e6 cycles at 1 GHz finish exactly at the deadline: utilisation 1.0
    i = inst(1, [1_000_000], levels=FrequencyLevels((1.0, 2.0, 3.0)))
    plan, energy = brute_force_optimal(i)
    assert plan.freq == {0: 1.0}
    assert judge_plan(i, plan).util[0] == pytest.approx(1.0)
    assert energy == pytest.approx(2.0)


def test_infeasible_returns_none():
    assert brute_force_optimal(inst(1, [3_000_000])) is None
    assert brute_force_naive(inst(1, [3_000_000])) is None


def test_two_threads_need_two_cores():
    # 0.6 of an f_min slot each: together they overflow one core
    c = int(0.6 * 1.0e9 * 1e-3)
    got = brute_force_optimal(inst(2, [c, c]))
    plan, energy = got
    assert plan.freq == {0: 1.0, 1: 1.0}
    assert not plan.isolated
    assert plan.affinity[0] != plan.affinity[1]
    assert energy == pytest.approx(2 * 2.0 * 0.6)
    naive_plan, naive_energy = brute_force_naive(inst(2, [c, c]))
    assert naive_energy == pytest.approx(energy)
    assert naive_plan.key() == plan.key()


def test_judge_plan_rejects_isolation_violation():
    v = judge_plan(inst(2, [1000]), SchedulingPlan({0: 1}, {0: 1.0, 1: 1.0}, {1}))
    assert not v.feasible


def test_size_bounds():
    with pytest.raises(OracleSizeError):
        inst(MAX_CORES + 1, [1])
    with pytest.raises(OracleSizeError):
        inst(1, [1] * (MAX_THREADS + 1))
    with pytest.raises(OracleSizeError):
        inst(1, [1], levels=FrequencyLevels(tuple(range(1, MAX_LEVELS + 2))))
    with pytest.raises(OracleSizeError):
        inst(1, [])


small_instances = st.builds(
    lambda n, cyc, ps, k, ctx: inst(n, cyc, FrequencyLevels((0.8, 1.6)), PowerModelParams(ps, k), ctx),
    st.integers(1, 2),
    st.lists(st.integers(0, 1_700_000), min_size=1, max_size=3),
    st.floats(0.5, 3.0),
    st.floats(0.5, 3.0),
    st.sampled_from([0, 20_000]),
)


@settings(max_examples=40, deadline=None)
@given(small_instances)
def test_decomposed_oracle_matches_enumeration(i):
    fast = brute_force_optimal(i)
    slow = brute_force_naive(i)
    assert (fast is None) == (slow is None)
    if fast is not None:
        assert fast[1] == pytest.approx(slow[1], rel=1e-9, abs=1e-12)
        assert judge_plan(i, fast[0]).feasible


@settings(max_examples=40, deadline=None)
@given(small_instances, st.randoms())
def test_relabelling_threads_keeps_energy(i, rnd):
    perm = list(i.cycles)
    rnd.shuffle(perm)
    a, b = brute_force_optimal(i), brute_force_optimal(inst(i.n_cores, perm, i.levels, i.power, i.ctx_switch_cycles))
    assert (a is None) == (b is None)
    if a is not None and i.ctx_switch_cycles == 0:
        assert a[1] == pytest.approx(b[1], rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(small_instances)
def test_extra_core_never_costs_energy(i):
    more = inst(i.n_cores + 1, i.cycles, i.levels, i.power, i.ctx_switch_cycles)
    a, b = brute_force_optimal(i), brute_force_optimal(more)
    if a is not None:
        assert b is not None
        assert b[1] <= a[1] + 1e-12


def test_random_instance_distribution():
    rng = np.random.default_rng(3)
    for _ in range(50):
        i = random_instance(rng)
        assert i.n_cores in (2, 3) and len(i.cycles) in (2, 3, 4)
        assert len(i.levels) == 3
        assert all(0.8 - 1e-9 <= f <= 3.2 + 1e-9 for f in i.levels)
        peak = i.levels.f_max * 1e6
        assert all(0.05 * peak - 1 <= c <= 0.9 * peak + 1 for c in i.cycles)
        assert i.power.p_idle == 0.0


def test_certification_rows_and_summary():
    rows = run_certification(10, seed=1)
    assert repr(rows) == repr(run_certification(10, seed=1))  # nan != nan
    assert all(r.agree for r in rows)
    for r in rows:
        if r.oracle_feasible:
            assert r.ratio >= 1 - 1e-9
    s = summarize(rows)
    assert s.instances == 10 and s.agreement == 1.0


def test_cert_row_ratio_edge_cases():
    nan_row = CertRow(0, 2, 2, False, False, float("nan"), float("nan"))
    assert nan_row.agree and np.isnan(nan_row.ratio)
    assert CertRow(0, 2, 2, True, True, 0.0, 0.0).ratio == 1.0
    assert summarize([]).passed
