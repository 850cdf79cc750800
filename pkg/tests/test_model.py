
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dappcpu.errors import (
    InvalidPlanError,
    MalformedInputError,
    NonPhysicalFitError,
    UnderdeterminedFitError,
)
from dappcpu.model import (
    ConstraintConfig,
    FrequencyLevels,
    PowerModelParams,
    SchedulingPlan,
    check_constraints,
    core_power,
    dwell_feasible,
    efficient_level,
    energy_per_cycle,
    fit_power_model,
    plan_energy,
)

P = PowerModelParams(10.0, 3.0, 2.0)


# --- core_power ---------------------------------------------------------

@pytest.mark.parametrize("f, watts", [(0.0, 10.0), (2.0, 22.0), (3.0, 37.0)])
def test_core_power_examples(f, watts):
    assert core_power(P, f) == pytest.approx(watts)


@given(
    ps=st.floats(0, 50), k=st.floats(0.01, 10),
    f1=st.floats(0, 6), f2=st.floats(0, 6),
)
def test_core_power_monotone_and_dynamic_term(ps, k, f1, f2):
    params = PowerModelParams(ps, k)
    lo, hi = sorted((f1, f2))
    if hi - lo > 1e-6:  # below this f**2 underflows to equal values
        assert core_power(params, hi) > core_power(params, lo)
    assert core_power(params, f1) - core_power(params, 0.0) == pytest.approx(k * f1 * f1, rel=1e-12, abs=1e-12)


def test_power_params_invariants():
    with pytest.raises(MalformedInputError):
        PowerModelParams(1.0, 0.0)
    with pytest.raises(MalformedInputError):
        PowerModelParams(1.0, 1.0, p_idle=2.0)
    with pytest.raises(MalformedInputError):
        PowerModelParams(-1.0, 1.0, p_idle=-2.0)


def test_efficient_level_minimises_energy_per_cycle():
    levels = FrequencyLevels((0.8, 1.2, 1.6, 3.2))
    params = PowerModelParams(1.92, 1.92)
    best = efficient_level(params, levels)
    assert best == 1.2
    assert all(energy_per_cycle(params, best) <= energy_per_cycle(params, f) for f in levels)


# --- levels and plans ---------------------------------------------------

def test_frequency_levels():
    lv = FrequencyLevels((1, 2, 3))
    assert (lv.f_min, lv.f_max) == (1.0, 3.0)
    assert lv.up(3.0) == 3.0 and lv.down(1.0) == 1.0
    assert lv.up(1.0) == 2.0 and lv.down(3.0) == 2.0
    assert lv.lowest_at_least(1.5) == 2.0 and lv.lowest_at_least(9) == 3.0
    assert 2.0 in lv and 2.5 not in lv
    with pytest.raises(MalformedInputError):
        FrequencyLevels(())
    with pytest.raises(MalformedInputError):
        FrequencyLevels((1.0, 1.0))
    with pytest.raises(MalformedInputError):
        lv.index(2.5)


def test_plan_validate():
    plan = SchedulingPlan({0: 0, 1: 0}, {0: 1.0, 1: 1.0}, {1})
    plan.validate(threads=[0, 1], levels=FrequencyLevels((1.0, 2.0)))
    with pytest.raises(InvalidPlanError):
        SchedulingPlan({0: 1}, {0: 1.0, 1: 1.0}, {1}).validate()
    with pytest.raises(InvalidPlanError):
        plan.validate(threads=[0, 1, 2])
    with pytest.raises(InvalidPlanError):
        SchedulingPlan({0: 0}, {0: 1.5}).validate(levels=FrequencyLevels((1.0, 2.0)))
    with pytest.raises(InvalidPlanError):
        SchedulingPlan({0: 5}, {0: 1.0}).validate()


def test_plan_text_is_canonical():
    a = SchedulingPlan({1: 0, 0: 1}, {1: 2.0, 0: 1.0}, frozenset())
    b = SchedulingPlan({0: 1, 1: 0}, {0: 1.0, 1: 2.0})
    assert a.to_text() == b.to_text() == "0:1;1:0,0:1;1:2,,1"
    assert a.key() == b.key()


# --- plan_energy --------------------------------------------------------

def test_plan_energy_examples():
    plan = SchedulingPlan({}, {0: 2.0, 1: 2.0})
    assert plan_energy(P, plan, {0: 0.5, 1: 0.0}) == pytest.approx(11.0)
    plan = SchedulingPlan({0: 0}, {0: 2.0, 1: 2.0}, {1})
    assert plan_energy(P, plan, {0: 1.0}) == pytest.approx(24.0)


def test_plan_energy_errors():
    plan = SchedulingPlan({}, {0: 2.0, 1: 2.0})
    with pytest.raises(MalformedInputError):
        plan_energy(P, plan, {0: 0.5})
    with pytest.raises(MalformedInputError):
        plan_energy(P, plan, {0: 0.5, 1: 1.5})


utils = st.lists(st.floats(0, 1), min_size=1, max_size=6)


@given(u=utils, data=st.data())
def test_plan_energy_monotone_and_linear(u, data):
    levels = (0.8, 1.6, 2.4, 3.2)
    n = len(u)
    freqs = data.draw(st.lists(st.sampled_from(levels), min_size=n, max_size=n))
    plan = SchedulingPlan({}, dict(enumerate(freqs)))
    util = dict(enumerate(u))
    e = plan_energy(P, plan, util)
    # monotone in one utilisation entry
    i = data.draw(st.integers(0, n - 1))
    bumped = dict(util)
    bumped[i] = min(1.0, util[i] + data.draw(st.floats(0, 1)))
    assert plan_energy(P, plan, bumped) >= e - 1e-12
    # monotone in one frequency entry
    faster = dict(plan.freq)
    faster[i] = max(levels)
    assert plan_energy(P, SchedulingPlan({}, faster), util) >= e - 1e-12
    # linear in a common utilisation scale
    scale = data.draw(st.floats(0.01, 1))
    scaled = {c: v * scale for c, v in util.items()}
    assert plan_energy(P, plan, scaled) == pytest.approx(scale * e, rel=1e-9, abs=1e-12)


# --- fitting ------------------------------------------------------------

def test_fit_exact():
    params, rss = fit_power_model([(1, 13), (2, 22), (3, 37)])
    assert params.p_static == pytest.approx(10.0, rel=1e-9)
    assert params.k_dyn == pytest.approx(3.0, rel=1e-9)
    assert rss < 1e-18


def test_fit_underdetermined():
    with pytest.raises(UnderdeterminedFitError):
        fit_power_model([(1, 13), (1, 13)])
    with pytest.raises(UnderdeterminedFitError):
        fit_power_model([])


def test_fit_non_physical():
    with pytest.raises(NonPhysicalFitError):
        fit_power_model([(1, 30), (2, 20), (3, 10)])


def _normal_equations(samples):
    # reference solve, independent of the least-squares routine used in the fit
    f = np.array([s[0] for s in samples])
    y = np.array([s[1] for s in samples])
    X = np.column_stack([np.ones_like(f), f ** 2])
    return np.linalg.solve(X.T @ X, X.T @ y)


def test_fit_noisy_matches_reference_and_truth():
    rng = np.random.default_rng(2024)
    freqs = np.linspace(0.8, 3.2, 20)
    samples = [(f, (12 + 2.5 * f * f) * (1 + 0.02 * rng.standard_normal())) for f in freqs]
    params, _ = fit_power_model(samples)
    ps_ref, k_ref = _normal_equations(samples)
    assert params.p_static == pytest.approx(ps_ref, rel=1e-9)
    assert params.k_dyn == pytest.approx(k_ref, rel=1e-9)
    assert abs(params.p_static - 12) / 12 <= 0.05
    assert abs(params.k_dyn - 2.5) / 2.5 <= 0.05


@settings(max_examples=60)
@given(
    ps=st.floats(0.1, 50), k=st.floats(0.1, 10),
    freqs=st.lists(st.floats(0.2, 5), min_size=2, max_size=12, unique=True),
)
def test_fit_noiseless_roundtrip(ps, k, freqs):
    if max(freqs) - min(freqs) < 0.05:
        return
    params, _ = fit_power_model([(f, ps + k * f * f) for f in freqs])
    assert params.p_static == pytest.approx(ps, rel=1e-9, abs=1e-9)
    assert params.k_dyn == pytest.approx(k, rel=1e-9)


# --- constraints --------------------------------------------------------

def test_constraints_boundary_inclusive():
    cfg = ConstraintConfig(tti=1e-3, delta=0.05, baseline_throughput=50e6)
    plan = SchedulingPlan({0: 0, 1: 1}, {0: 1.0, 1: 1.0})
    rep = check_constraints(cfg, plan, {0: 1e-3, 1: 1e-3}, 50e6)
    assert rep.feasible
    rep = check_constraints(cfg, plan, {0: 1e-3, 1: 0.0}, 50e6 * 1.05)
    assert rep.throughput_ok


def test_constraints_isolation_flag():
    cfg = ConstraintConfig(tti=1e-3)
    plan = SchedulingPlan({0: 1}, {0: 1.0, 1: 1.0}, {1})
    rep = check_constraints(cfg, plan, {0: 0.0}, 0.0)
    assert not rep.isolation_ok and not rep.feasible
    assert rep.diagnostics


def test_constraints_latency_violation():
    cfg = ConstraintConfig(tti=1e-3)
    plan = SchedulingPlan({0: 0, 1: 0}, {0: 1.0})
    rep = check_constraints(cfg, plan, {0: 1.2e-3, 1: 0.3e-3}, 0.0)
    assert rep.latency_ok == {0: False, 1: True}
    assert rep.worst_latency == pytest.approx(1.2e-3)
    assert rep.latency_violated and not rep.feasible


def test_constraints_throughput_violation():
    cfg = ConstraintConfig(tti=1e-3, delta=0.05, baseline_throughput=50e6)
    plan = SchedulingPlan({0: 0}, {0: 1.0})
    rep = check_constraints(cfg, plan, {0: 0.0}, 47e6)
    assert not rep.throughput_ok
    assert rep.throughput_deviation == pytest.approx(0.06)


@given(
    lat=st.lists(st.floats(0, 2e-3), min_size=1, max_size=5),
    tp=st.floats(0, 100e6),
)
def test_constraints_pure(lat, tp):
    cfg = ConstraintConfig(tti=1e-3, baseline_throughput=50e6)
    plan = SchedulingPlan({i: 0 for i in range(len(lat))}, {0: 1.0})
    lats = dict(enumerate(lat))
    assert check_constraints(cfg, plan, lats, tp) == check_constraints(cfg, plan, lats, tp)


def test_constraint_config_validation():
    with pytest.raises(MalformedInputError):
        ConstraintConfig(tti=0)
    with pytest.raises(MalformedInputError):
        ConstraintConfig(tti=1e-3, delta=1.0)
    with pytest.raises(MalformedInputError):
        ConstraintConfig(tti=1e-3, residency=-1)


@pytest.mark.parametrize(
    "rt, wt, tti, ok",
    [
        (200e-6, 100e-6, 1e-3, True),
        (80e-6, 70e-6, 62.5e-6, False),
        (0.0, 0.0, 62.5e-6, True),
        (1e-3, 0.0, 1e-3, False),
    ],
)
def test_dwell_feasible(rt, wt, tti, ok):
    assert dwell_feasible(ConstraintConfig(tti=tti, residency=rt, wakeup=wt)) is ok
