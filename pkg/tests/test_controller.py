import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dappcpu.errors import ConfigError
from dappcpu.controller import (
    ALL_POLICIES,
    Controller,
    ControllerConfig,
    PolicyKind,
    affinity_cluster,
    decide,
    enforce_or_rollback,
    governor_step,
    settle_frequency,
    start_level,
)
from dappcpu.model import ConstraintConfig, ConstraintReport, FrequencyLevels, PowerModelParams, SchedulingPlan
from dappcpu.oracle import OracleInstance, brute_force_optimal, heuristic_plan, judge_plan
from dappcpu.scenario import ScenarioConfig, ThreadProfile
from dappcpu.simulator import run_scenario
from dappcpu.telemetry import CoreStats, ThreadStats

LEVELS = FrequencyLevels((0.8, 1.2, 1.6, 2.0))
CFG = ControllerConfig(LEVELS, min_dwell_slots=10)
MS = 1_000_000


def tstats(util, mpki=0.0, ghz=None):
    ghz = util * 2.0 if ghz is None else ghz
    return ThreadStats(util, 1.0, mpki, 0.0, MS, runtime_ns=int(util * MS), cycles=int(ghz * MS))


def core(util, c=0):
    return CoreStats(c, min(util, 1.0), 1.0, 0.0, 0.0, MS, raw_utilization=util)


def report(ok=True):
    return ConstraintReport({0: ok}, True, True, 0.0, 0.0)


def kernel_plan(n_threads, n_cores, f=2.0):
    return SchedulingPlan(
        {t: t % n_cores for t in range(n_threads)}, {c: f for c in range(n_cores)}, pinned=False
    )


# --- governor -------------------------------------------------------------

@pytest.mark.parametrize(
    "util, f, age, expected",
    [
        (0.9, 1.2, 10, 1.6),
        (0.9, 2.0, 10, 2.0),
        (0.2, 1.2, 10, 0.8),
        (0.2, 0.8, 10, 0.8),
        (0.5, 1.2, 10, 1.2),
        (0.9, 1.2, 9, 1.2),
        (0.8, 1.2, 10, 1.2),  # boundaries are inside the band
        (0.3, 1.2, 10, 1.2),
    ],
)
def test_governor_step(util, f, age, expected):
    assert governor_step(core(util), f, CFG, age) == expected


def test_settle_frequency_and_start_level():
    # 1.0 GHz of demand: 1.6 is the first level under 80 %, and 1.0/1.6 is in band
    assert start_level(1.0, CFG) == 1.6
    assert settle_frequency(1.0, 1.6, CFG) == 1.6
    # from f_max the load sits at 50 %, inside the band, so nothing moves
    assert settle_frequency(1.0, 2.0, CFG) == 2.0
    assert settle_frequency(0.5, 2.0, CFG) == 1.6  # 25 % -> one step, then 31 % holds
    assert settle_frequency(0.0, 2.0, CFG) == 0.8
    floored = ControllerConfig(LEVELS, floor_ghz=1.2)
    assert settle_frequency(0.1, 2.0, floored) == 1.2
    assert settle_frequency(0.0, 2.0, floored) == 0.8
    assert start_level(5.0, CFG) == 2.0


def test_controller_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(LEVELS, down_threshold=0.9, up_threshold=0.8)
    with pytest.raises(ConfigError):
        ControllerConfig(LEVELS, pack_ghz=1.3)
    with pytest.raises(ConfigError):
        ControllerConfig.from_overrides(LEVELS, {"nonsense": 1})
    assert ControllerConfig.from_overrides(LEVELS, {"cadence_slots": 5.0}).cadence_slots == 5
    with pytest.raises(ConfigError):
        CFG.check_dwell(ConstraintConfig(tti=1e-3, residency=0.02))
    CFG.check_dwell(ConstraintConfig(tti=1e-3, residency=0.01))


# --- affinity clustering --------------------------------------------------

def test_affinity_cluster_examples():
    stats = {0: tstats(0.5), 1: tstats(0.4), 2: tstats(0.3)}
    mapping, parked = affinity_cluster(stats, 3, CFG)
    assert mapping == {0: 0, 1: 1, 2: 0}
    assert parked == {2}

    mapping, parked = affinity_cluster({0: tstats(0.5)}, 8, CFG)
    assert mapping == {0: 0} and parked == set(range(1, 8))

    hot = {0: tstats(0.2, mpki=20), 1: tstats(0.2, mpki=20)}
    mapping, _ = affinity_cluster(hot, 2, CFG)
    assert mapping[0] != mapping[1]
    with pytest.raises(ValueError):
        affinity_cluster(stats, 0, CFG)


def test_affinity_cluster_overload_keeps_every_thread():
    stats = {t: tstats(0.9) for t in range(5)}
    mapping, parked = affinity_cluster(stats, 2, CFG)
    assert set(mapping) == set(stats) and set(mapping.values()) <= {0, 1}
    assert parked == set()


# --- decide -----------------------------------------------------------------

def test_baseline_decision():
    stats = {t: tstats(0.1) for t in range(3)}
    plan = decide(stats, {}, kernel_plan(3, 4, 0.8), CFG, PolicyKind.BASELINE)
    assert set(plan.freq.values()) == {2.0}
    assert not plan.isolated and not plan.pinned


def test_combined_with_idle_threads():
    stats = {t: tstats(0.0, ghz=0.0) for t in range(4)}
    plan = decide(stats, {}, kernel_plan(4, 4), CFG, PolicyKind.COMBINED)
    assert set(plan.affinity.values()) == {0}
    assert plan.freq[0] == 0.8
    assert plan.isolated == {1, 2, 3}


def test_combined_respects_dwell_age():
    stats = {0: tstats(0.1, ghz=0.1)}
    cur = kernel_plan(1, 1)
    young = decide(stats, {}, cur, CFG, PolicyKind.COMBINED, dwell_ages={0: 3})
    old = decide(stats, {}, cur, CFG, PolicyKind.COMBINED, dwell_ages={0: 10})
    assert young.freq[0] == 2.0
    assert old.freq[0] == 0.8


def test_static_affinity_frozen_after_first_decision():
    stats = {0: tstats(0.3), 1: tstats(0.3)}
    first = decide(stats, {}, kernel_plan(2, 3), CFG, PolicyKind.STATIC_AFFINITY)
    assert first.pinned and set(first.freq.values()) == {2.0}
    changed = {0: tstats(0.8), 1: tstats(0.8)}
    assert decide(changed, {}, first, CFG, PolicyKind.STATIC_AFFINITY).affinity == first.affinity


def test_ondemand_moves_per_core():
    stats = {0: tstats(0.9), 1: tstats(0.1)}
    cur = kernel_plan(2, 2, 1.2)
    plan = decide(stats, {0: core(0.9, 0), 1: core(0.1, 1)}, cur, CFG, PolicyKind.ON_DEMAND_FREQ)
    assert plan.freq == {0: 1.6, 1: 0.8}
    assert not plan.isolated and not plan.pinned


def test_decide_fail_safe_returns_current():
    cur = kernel_plan(2, 2)
    assert decide({0: tstats(0.1), 1: tstats(0.1)}, {}, cur, CFG, "nonsense") is cur


stats_strategy = st.dictionaries(
    st.integers(0, 7),
    st.builds(lambda u, m: tstats(u, mpki=m), st.floats(0, 1), st.sampled_from([0.0, 20.0])),
    min_size=1,
    max_size=8,
)


@settings(max_examples=80)
@given(stats_strategy, st.integers(1, 4), st.sampled_from(ALL_POLICIES), st.sampled_from(LEVELS.ghz))
def test_decide_never_violates_isolation(stats, n_cores, kind, f):
    cur = SchedulingPlan({t: t % n_cores for t in stats}, {c: f for c in range(n_cores)}, pinned=False)
    roll = {c: core(0.5, c) for c in range(n_cores)}
    plan = decide(stats, roll, cur, CFG, kind)
    assert not plan.isolation_violations()
    plan.validate(threads=stats, levels=LEVELS)
    if kind in (PolicyKind.BASELINE, PolicyKind.STATIC_AFFINITY):
        assert set(plan.freq.values()) == {LEVELS.f_max}


def test_policy_parse():
    assert PolicyKind.parse("Combined") is PolicyKind.COMBINED
    assert PolicyKind.parse("on-demand") is PolicyKind.ON_DEMAND_FREQ
    assert PolicyKind.parse("II") is PolicyKind.STATIC_AFFINITY
    with pytest.raises(ValueError):
        PolicyKind.parse("turbo")


# --- rollback -------------------------------------------------------------

def test_enforce_clean_window_accepts_candidate():
    cand = kernel_plan(2, 2, 0.8)
    assert enforce_or_rollback(cand, report(True), kernel_plan(2, 2), LEVELS) is cand
    assert enforce_or_rollback(cand, None, kernel_plan(2, 2), LEVELS) is cand


def test_enforce_single_violation_recovers():
    cur = SchedulingPlan({0: 0, 1: 0, 2: 1}, {0: 1.2, 1: 0.8, 2: 0.8, 3: 1.2}, {2, 3}, pinned=True)
    out = enforce_or_rollback(kernel_plan(3, 4), report(False), cur, LEVELS, streak=1)
    assert out.freq[0] == 1.6 and out.freq[1] == 1.2
    assert out.isolated == {3}
    assert out.affinity[1] == 2 and out.freq[2] == 1.6
    assert not out.isolation_violations()


def test_enforce_repeated_violation_escalates():
    cur = SchedulingPlan({0: 0, 1: 0}, {0: 0.8, 1: 0.8}, {1}, pinned=True)
    out = enforce_or_rollback(cur, report(False), cur, LEVELS, streak=2)
    assert set(out.freq.values()) == {2.0}
    assert not out.isolated and not out.pinned


# --- stateful controller ----------------------------------------------------

def test_controller_dwell_guard_holds_changes():
    ctrl = Controller(ControllerConfig(LEVELS, min_dwell_slots=50), PolicyKind.ON_DEMAND_FREQ, [0], [0])
    busy, idle = {0: tstats(0.1)}, {0: core(0.1)}
    assert ctrl.on_window(busy, idle, 100).freq[0] == 1.6
    assert ctrl.on_window(busy, idle, 120).freq[0] == 1.6  # 20 slots < dwell
    assert ctrl.on_window(busy, idle, 150).freq[0] == 1.2


def test_controller_failsafe_keeps_plan():
    ctrl = Controller(CFG, PolicyKind.COMBINED, [0, 1], [0, 1])
    before = ctrl.plan
    out = ctrl.on_window({0: tstats(0.1)}, {}, 100)
    assert out is before and ctrl.failsafe == 1


def test_controller_rollback_counters():
    ctrl = Controller(CFG, PolicyKind.COMBINED, [0], [0, 1])
    stats = {0: tstats(0.1, ghz=0.1)}
    ctrl.on_window(stats, {}, 100, report(True))
    ctrl.on_window(stats, {}, 200, report(False))
    ctrl.on_window(stats, {}, 300, report(False))
    assert (ctrl.rollbacks, ctrl.escalations) == (1, 1)
    assert set(ctrl.plan.freq.values()) == {2.0}
    ctrl.on_window(stats, {}, 400, report(True))
    assert ctrl.streak == 0


def test_steady_state_has_no_transitions():
    threads = [ThreadProfile(i, 3e5 + 1e5 * i) for i in range(4)]
    cfg = ScenarioConfig(
        n_cores=4, threads=tuple(threads), freq_levels=LEVELS, power=PowerModelParams(1.0, 1.0),
        duration_slots=2000, switch_latency=0.0,
        controller={"cadence_slots": 100, "warmup_slots": 50, "min_dwell_slots": 50},
    )
    rep = run_scenario(cfg, "combined")
    late = [p.key() for s, p in rep.plan_trace if s >= 1000]
    assert len(set(late)) == 1
    assert rep.deadline_misses == 0


def test_combined_close_to_oracle_on_small_instance():
    inst = OracleInstance(
        3, (500_000, 400_000, 300_000, 200_000), FrequencyLevels((0.8, 1.2, 2.0)), PowerModelParams(1.5, 1.0, 0.0)
    )
    opt_plan, opt = brute_force_optimal(inst)
    got = judge_plan(inst, heuristic_plan(inst))
    assert got.feasible
    assert got.energy <= 1.15 * opt
