"""Exhaustive reference optimiser for small instances.

The search space is every total affinity map, every per-core frequency and
every isolation set that leaves mapped cores alone. Feasibility is judged
with the simulator's own jitter-free slot model (:func:`serve_core`), so the
oracle and the heuristic are held to the same physics.

Energy is a sum of per-core terms and feasibility is a per-core property, so
:func:`brute_force_optimal` minimises core by core for each affinity map. This
returns exactly the optimum of the full enumeration, which
:func:`enumerate_plans` still provides for cross-checking.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .controller import PolicyKind
from .errors import OracleSizeError
from .model import FrequencyLevels, PowerModelParams, SchedulingPlan, core_power, plan_energy
from .simulator import serve_core

MAX_CORES = 4
MAX_THREADS = 5
MAX_LEVELS = 4
MAX_SWITCHES = 3
_TOL = 1e-12


@dataclass(frozen=True)
class OracleInstance:
    n_cores: int
    cycles: Tuple[int, ...]
    levels: FrequencyLevels
    power: PowerModelParams
    tti: float = 1e-3
    ctx_switch_cycles: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(int(c) for c in self.cycles))
        if not 1 <= self.n_cores <= MAX_CORES:
            raise OracleSizeError(f"n_cores must lie in [1, {MAX_CORES}], got {self.n_cores}")
        if not 1 <= len(self.cycles) <= MAX_THREADS:
            raise OracleSizeError(f"thread count must lie in [1, {MAX_THREADS}], got {len(self.cycles)}")
        if len(self.levels) > MAX_LEVELS:
            raise OracleSizeError(f"at most {MAX_LEVELS} frequency levels, got {len(self.levels)}")
        if self.levels.f_min <= 0:
            raise OracleSizeError("frequency levels must be positive")
        if any(c < 0 for c in self.cycles):
            raise OracleSizeError("negative cycle demand")
        if not self.tti > 0:
            raise OracleSizeError("tti must be positive")

    @property
    def threads(self) -> List[int]:
        return list(range(len(self.cycles)))

    @property
    def cores(self) -> List[int]:
        return list(range(self.n_cores))


@dataclass(frozen=True)
class CoreVerdict:
    feasible: bool
    util: float
    worst: float


@dataclass(frozen=True)
class PlanVerdict:
    feasible: bool
    energy: float
    util: Dict[int, float] = field(default_factory=dict)
    worst_latency: float = 0.0


def judge_core(inst: OracleInstance, members: Sequence[int], f: float) -> CoreVerdict:
    """One deterministic slot of ``members`` (ThreadId order) on a core at ``f``."""
    demands = [inst.cycles[t] for t in members]
    for j in range(1, min(len(demands), 1 + MAX_SWITCHES)):
        demands[j] += inst.ctx_switch_cycles
    svc = serve_core(demands, f, inst.tti)
    worst = max(svc.completion, default=0.0)
    util = min(1.0, sum(svc.consumed) / (f * 1e9 * inst.tti))
    return CoreVerdict(worst <= inst.tti + 1e-15, util, worst)


def judge_plan(inst: OracleInstance, plan: SchedulingPlan) -> PlanVerdict:
    """Feasibility and energy of ``plan`` on a jitter-free slot."""
    members: Dict[int, List[int]] = {c: [] for c in plan.freq}
    for t, c in plan.affinity.items():
        members[c].append(t)
    if plan.isolation_violations():
        return PlanVerdict(False, float("inf"))
    util = {}
    feasible = True
    worst = 0.0
    for c in plan.active_cores:
        v = judge_core(inst, sorted(members[c]), plan.freq[c])
        util[c] = v.util
        feasible = feasible and v.feasible
        worst = max(worst, v.worst)
    return PlanVerdict(feasible, plan_energy(inst.power, plan, util), util, worst)


def enumerate_plans(inst: OracleInstance) -> Iterator[SchedulingPlan]:
    """Every plan of the discrete decision space respecting isolation."""
    cores = inst.cores
    for assign in itertools.product(cores, repeat=len(inst.cycles)):
        affinity = dict(enumerate(assign))
        unused = [c for c in cores if c not in set(assign)]
        for freqs in itertools.product(inst.levels.ghz, repeat=len(cores)):
            freq = dict(zip(cores, freqs))
            for r in range(len(unused) + 1):
                for iso in itertools.combinations(unused, r):
                    yield SchedulingPlan(affinity, freq, frozenset(iso))


def _rank(plan: SchedulingPlan, energy: float):
    return (round(energy, 9), len(plan.active_cores), plan.key())


def brute_force_naive(inst: OracleInstance) -> Optional[Tuple[SchedulingPlan, float]]:
    """Literal enumeration; only practical for the tiniest instances."""
    best = None
    for plan in enumerate_plans(inst):
        v = judge_plan(inst, plan)
        if v.feasible and (best is None or _rank(plan, v.energy) < _rank(*best)):
            best = (plan, v.energy)
    return best


def brute_force_optimal(inst: OracleInstance) -> Optional[Tuple[SchedulingPlan, float]]:
    """Minimum-energy feasible plan, or ``None`` when no plan meets every deadline.

    Ties go to fewer active cores, then to the lexicographically smallest plan.
    """
    levels = inst.levels.ghz
    cores = inst.cores
    p_idle = inst.power.p_idle
    # best (energy, f) of a thread group on one core; core identity is irrelevant
    cache: Dict[Tuple[int, ...], Optional[Tuple[float, float]]] = {}

    def group_best(members: Tuple[int, ...]):
        if members not in cache:
            best = None
            for f in levels:
                v = judge_core(inst, members, f)
                if v.feasible:
                    e = core_power(inst.power, f) * v.util
                    if best is None or e < best[0] - _TOL:
                        best = (e, f)
            cache[members] = best
        return cache[members]

    best_plan = None
    best_rank = None
    for assign in itertools.product(cores, repeat=len(inst.cycles)):
        groups: Dict[int, List[int]] = {}
        for t, c in enumerate(assign):
            groups.setdefault(c, []).append(t)
        energy = 0.0
        freq = {}
        ok = True
        for c in cores:
            if c in groups:
                res = group_best(tuple(groups[c]))
                if res is None:
                    ok = False
                    break
                energy += res[0]
                freq[c] = res[1]
            else:
                freq[c] = levels[0]
        if not ok:
            continue
        # an unused core costs nothing when left active and p_idle when parked;
        # with p_idle = 0 parking wins the tie on active-core count
        unused = [c for c in cores if c not in groups]
        isolated = frozenset(unused) if p_idle == 0 else frozenset()
        energy += p_idle * len(isolated)
        plan = SchedulingPlan(dict(enumerate(assign)), freq, isolated)
        rank = _rank(plan, energy)
        if best_rank is None or rank < best_rank:
            best_plan, best_rank = plan, rank
    if best_plan is None:
        return None
    return best_plan, judge_plan(inst, best_plan).energy


def random_instance(
    rng: np.random.Generator,
    n_cores: Sequence[int] = (2, 3),
    n_threads: Sequence[int] = (2, 3, 4),
    n_levels: int = 3,
) -> OracleInstance:
    """Seeded instance: levels drawn from a 0.8-3.2 GHz ladder, per-thread
    demand between 5 % and 90 % of one f_max slot."""
    ladder = np.round(np.arange(0.8, 3.2 + 1e-9, 0.4), 1)
    levels = FrequencyLevels(tuple(sorted(rng.choice(ladder, size=n_levels, replace=False).tolist())))
    n = int(rng.choice(n_cores))
    m = int(rng.choice(n_threads))
    tti = 1e-3
    peak = levels.f_max * 1e9 * tti
    cycles = tuple(int(round(x * peak)) for x in rng.uniform(0.05, 0.9, size=m))
    power = PowerModelParams(float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.5, 3.0)), 0.0)
    return OracleInstance(n, cycles, levels, power, tti)


def instance_scenario(inst: OracleInstance, slots: int = 1):
    """The instance as a penalty-free, jitter-free simulator scenario."""
    from .scenario import ScenarioConfig, ThreadProfile

    threads = tuple(ThreadProfile(id=t, cycles_per_slot=c) for t, c in enumerate(inst.cycles))
    return ScenarioConfig(
        n_cores=inst.n_cores,
        threads=threads,
        freq_levels=inst.levels,
        power=inst.power,
        tti=inst.tti,
        ctx_switch_cycles=inst.ctx_switch_cycles,
        migration_penalty_cycles=0,
        migration_mpki_boost=(1.0, 0),
        switch_latency=0.0,
        switch_energy=0.0,
        duration_slots=slots,
        name="oracle",
        controller={"cadence_slots": 1, "warmup_slots": 1, "min_dwell_slots": 0},
    )


def heuristic_plan(inst: OracleInstance, max_rounds: int = 40) -> SchedulingPlan:
    """Steady-state plan of the Combined controller.

    Starting from the kernel default, each round runs one jitter-free slot
    under the current plan and hands its telemetry to the controller, until
    the plan has held for three rounds. A feasible plan's telemetry equals
    the true demand, so the plan reached is a steady state of the loop.
    Deadline rollback is left out: it guards against transients, which a
    deterministic instance does not have.
    """
    from .controller import Controller
    from .simulator import Simulator, controller_config_for
    from .telemetry import aggregate_window, rollup_records

    cfg = instance_scenario(inst)
    ctrl = Controller(controller_config_for(cfg), PolicyKind.COMBINED, inst.threads, inst.cores)
    sim = Simulator(cfg)
    window_ns = cfg.tti_ns
    held = 0
    for slot in range(1, max_rounds + 1):
        before = ctrl.plan
        sim.step_slot(before)
        recs = sim.emit_telemetry()
        stats = aggregate_window(recs, window_ns)
        rollup = rollup_records(recs, window_ns, inst.cores)
        after = ctrl.on_window(stats, rollup, slot)
        held = held + 1 if after.key() == before.key() else 0
        if held >= 3:
            break
    return ctrl.plan


@dataclass(frozen=True)
class CertRow:
    index: int
    n_cores: int
    n_threads: int
    oracle_feasible: bool
    heuristic_feasible: bool
    oracle_energy: float
    heuristic_energy: float

    @property
    def agree(self) -> bool:
        return self.oracle_feasible == self.heuristic_feasible

    @property
    def ratio(self) -> float:
        if not (self.oracle_feasible and self.heuristic_feasible):
            return float("nan")
        if self.oracle_energy == 0:
            return 1.0 if self.heuristic_energy == 0 else float("inf")
        return self.heuristic_energy / self.oracle_energy


def certify(inst: OracleInstance, index: int = 0) -> CertRow:
    opt = brute_force_optimal(inst)
    plan = heuristic_plan(inst)
    hv = judge_plan(inst, plan)
    return CertRow(
        index=index,
        n_cores=inst.n_cores,
        n_threads=len(inst.cycles),
        oracle_feasible=opt is not None,
        heuristic_feasible=hv.feasible,
        oracle_energy=opt[1] if opt else float("nan"),
        heuristic_energy=hv.energy if hv.feasible else float("nan"),
    )


@dataclass(frozen=True)
class CertSummary:
    instances: int
    feasible: int
    agreement: float
    within_bound: float
    bound: float = 1.15

    @property
    def passed(self) -> bool:
        return self.agreement == 1.0 and (self.feasible == 0 or self.within_bound >= 0.90)


def summarize(rows: Sequence[CertRow], bound: float = 1.15) -> CertSummary:
    n = len(rows)
    feas = [r for r in rows if r.oracle_feasible]
    agree = sum(r.agree for r in rows) / n if n else 1.0
    within = sum(1 for r in feas if r.heuristic_feasible and r.ratio <= bound) / len(feas) if feas else 1.0
    return CertSummary(n, len(feas), agree, within, bound)


def run_certification(n_instances: int, seed: int) -> List[CertRow]:
    rng = np.random.default_rng(seed)
    return [certify(random_instance(rng), i) for i in range(n_instances)]
