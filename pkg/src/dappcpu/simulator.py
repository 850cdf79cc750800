"""Slot-driven model of a multicore DU host.

Each slot (one TTI) every thread brings a cycle demand: its base demand with
seeded, truncated-normal jitter, plus stall cycles for its cache misses, plus
one-off migration and context-switch charges. The threads sharing a core are
served by processor sharing in ThreadId order; a thread meets its deadline
when its demand is satisfied inside the slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .controller import Controller, ControllerConfig, PolicyKind
from .errors import InvalidPlanError
from .model import (
    ConstraintConfig,
    SchedulingPlan,
    check_constraints,
    efficient_level,
    plan_energy,
)
from .scenario import ScenarioConfig, inject_background
from .telemetry import (
    CoreStats,
    TelemetryRecord,
    ThreadStats,
    aggregate_window,
    rollup_records,
)

JITTER_CLIP = 3.0
_CHUNK = 512


@dataclass
class SlotOutcome:
    slot: int
    completion: Dict[int, float]
    deadline_met: Dict[int, bool]
    bits_delivered: int
    slot_power: float
    transitions: int
    core_util: Dict[int, float] = field(default_factory=dict)


@dataclass
class CoreService:
    """Result of serving one core for one slot."""

    consumed: List[int]
    completion: List[float]


def serve_core(demands: Sequence[int], f_ghz: float, tti: float, stall: float = 0.0) -> CoreService:
    """Processor-sharing service of ``demands`` (cycles, ThreadId order).

    Capacity is ``f * (tti - stall)``. Completion times are measured from the
    slot start; unsatisfied threads report the time they would have needed,
    which exceeds ``tti``.
    """
    k = len(demands)
    consumed = [0] * k
    completion = [0.0] * k
    if k == 0:
        return CoreService(consumed, completion)
    rate = f_ghz * 1e9
    capacity = rate * max(tti - stall, 0.0)
    order = sorted(range(k), key=lambda i: (demands[i], i))
    done = 0
    finished_work = 0.0
    prev = 0
    for pos, i in enumerate(order):
        d = demands[i]
        if d == 0:
            completion[i] = 0.0
            continue
        # work executed when the pos-th smallest finishes
        done += (d - prev) * (k - pos)
        prev = d
        completion[i] = stall + done / rate
        if done <= capacity + 1e-6:
            consumed[i] = d
            finished_work += d
        else:
            consumed[i] = -1
    unfinished = [i for i in range(k) if consumed[i] < 0]
    if unfinished:
        share = (capacity - finished_work) / len(unfinished)
        for i in unfinished:
            consumed[i] = max(0, min(demands[i], int(share)))
    return CoreService(consumed, completion)


class Simulator:
    """Mutable host state advanced one slot at a time."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.threads = sorted(cfg.threads, key=lambda t: t.id)
        self.ids = [t.id for t in self.threads]
        self.tti_ns = cfg.tti_ns
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        self._jitter_rng = np.random.default_rng(seeds[0])
        self._order_rng = np.random.default_rng(seeds[1])
        self._z = np.empty((0, len(self.ids)))
        self._perm = np.empty((0, len(self.ids)), dtype=int)
        self._row = 0
        self.slot = 0
        self.core_freq = {c: cfg.freq_levels.f_max for c in cfg.cores}
        self.last_core: Dict[int, int] = {}
        self.mig_age: Dict[int, int] = {}
        self._plan_id = None
        self.last_records: List[TelemetryRecord] = []
        self.last_outcome: Optional[SlotOutcome] = None
        self._ipc = {
            t.id: cfg.ipc_peak * (1.0 - 0.5 * t.memory_intensity) for t in self.threads
        }

    def _draws(self):
        if self._row >= len(self._z):
            m = len(self.ids)
            self._z = np.clip(
                self._jitter_rng.standard_normal((_CHUNK, m)), -JITTER_CLIP, JITTER_CLIP
            )
            self._perm = np.argsort(self._order_rng.random((_CHUNK, m)), axis=1, kind="stable")
            self._row = 0
        z = self._z[self._row].tolist()
        perm = self._perm[self._row].tolist()
        self._row += 1
        return z, perm

    def _check(self, plan: SchedulingPlan):
        if id(plan) == self._plan_id:
            return
        if plan.isolation_violations():
            raise InvalidPlanError(
                f"threads {plan.isolation_violations()} mapped to isolated cores"
            )
        plan.validate(threads=self.ids, levels=self.cfg.freq_levels)
        if set(plan.freq) != set(self.core_freq):
            raise InvalidPlanError("plan does not cover exactly the host's cores")
        self._plan_id = id(plan)

    def _rebalance(self, plan, base, perm):
        """Kernel-default placement: wakeup order is random, each thread
        lands on the currently least loaded (in time) schedulable core."""
        active = plan.active_cores
        load = {c: 0.0 for c in active}
        freq = plan.freq
        placement = {}
        for idx in perm:
            tid = self.ids[idx]
            core = min(active, key=lambda c: (load[c], c))
            placement[tid] = core
            load[core] += base[idx] / freq[core]
        return placement

    def step_slot(self, plan: SchedulingPlan) -> SlotOutcome:
        cfg = self.cfg
        self._check(plan)
        tti = cfg.tti
        z, perm = self._draws()

        transitions = 0
        stall: Dict[int, float] = {}
        for c, f in plan.freq.items():
            if f != self.core_freq[c]:
                transitions += 1
                stall[c] = cfg.switch_latency
                self.core_freq[c] = f

        base = [
            max(0, int(round(t.cycles_per_slot * (1.0 + t.demand_jitter * z[i]))))
            for i, t in enumerate(self.threads)
        ]
        placement = plan.affinity if plan.pinned else self._rebalance(plan, base, perm)

        factor, decay = cfg.migration_mpki_boost
        n = len(self.ids)
        instr = [0] * n
        misses = [0] * n
        demand = [0] * n
        migrated = [False] * n
        members: Dict[int, List[int]] = {}
        for i, t in enumerate(self.threads):
            tid = t.id
            core = placement[tid]
            if base[i] > 0:
                prev = self.last_core.get(tid)
                if prev is not None and prev != core:
                    migrated[i] = True
                    self.mig_age[tid] = 0
                self.last_core[tid] = core
                age = self.mig_age.get(tid)
                boost = 1.0
                if age is not None and age < decay:
                    boost = 1.0 + (factor - 1.0) * (1.0 - age / decay)
                ins = int(round(base[i] * self._ipc[tid]))
                mis = int(round(t.memory_intensity * cfg.miss_rate_peak * boost * ins / 1000.0))
                instr[i] = ins
                misses[i] = mis
                demand[i] = base[i] + mis * cfg.stall_cycles_per_miss
                if migrated[i]:
                    demand[i] += cfg.migration_penalty_cycles
                members.setdefault(core, []).append(i)
            if tid in self.mig_age:
                self.mig_age[tid] += 1

        ctx = [0] * n
        consumed = [0] * n
        completion = [0.0] * n
        runtime = [0] * n
        core_runtime = {c: 0 for c in plan.freq}
        for core, idxs in members.items():
            # preemptions of every thread after the first, then migrations in;
            # the scheduler granularity caps what one core can do per slot
            cap = cfg.max_switches_per_slot
            events = idxs[1:] + [i for i in idxs if migrated[i]]
            for i in events[:cap]:
                ctx[i] += 1
            for i in idxs[1 : 1 + cap]:
                demand[i] += cfg.ctx_switch_cycles
            f = plan.freq[core]
            svc = serve_core([demand[i] for i in idxs], f, tti, stall.get(core, 0.0))
            for j, i in enumerate(idxs):
                consumed[i] = svc.consumed[j]
                completion[i] = svc.completion[j]
                rt = int(round(svc.consumed[j] / f))
                runtime[i] = rt
                core_runtime[core] += rt

        deadline = {}
        comp = {}
        bits = 0
        records = []
        ts = (self.slot + 1) * self.tti_ns
        for i, t in enumerate(self.threads):
            met = completion[i] <= tti + 1e-15
            deadline[t.id] = met
            comp[t.id] = completion[i]
            if met:
                bits += t.bits_per_slot
            cyc = consumed[i]
            ins, mis = instr[i], misses[i]
            if cyc < demand[i] and demand[i] > 0:
                frac = cyc / demand[i]
                ins = int(ins * frac)
                mis = int(mis * frac)
            records.append(
                TelemetryRecord(ts, t.id, placement[t.id], cyc, ins, mis, ctx[i], runtime[i])
            )

        util = {c: min(1.0, rt / self.tti_ns) for c, rt in core_runtime.items()}
        power = plan_energy(cfg.power, plan, util) + cfg.switch_energy * transitions / tti
        out = SlotOutcome(
            slot=self.slot,
            completion=comp,
            deadline_met=deadline,
            bits_delivered=bits,
            slot_power=power,
            transitions=transitions,
            core_util=util,
        )
        self.last_records = records
        self.last_outcome = out
        self.slot += 1
        return out

    def emit_telemetry(self) -> List[TelemetryRecord]:
        """Counter records of the slot just executed, one per thread."""
        return list(self.last_records)


def controller_config_for(cfg: ScenarioConfig) -> ControllerConfig:
    """Controller settings for a scenario: its overrides on top of defaults,
    packing against (and flooring busy cores at) the most energy-efficient
    level unless overridden."""
    overrides = dict(cfg.controller)
    overrides.setdefault("delta", cfg.delta)
    best = efficient_level(cfg.power, cfg.freq_levels)
    overrides.setdefault("pack_ghz", best)
    overrides.setdefault("floor_ghz", best)
    ccfg = ControllerConfig.from_overrides(cfg.freq_levels, overrides)
    ccfg.check_dwell(constraint_config(cfg))
    return ccfg


def constraint_config(cfg: ScenarioConfig, baseline_throughput: float = 0.0) -> ConstraintConfig:
    return ConstraintConfig(
        tti=cfg.tti,
        delta=cfg.delta,
        baseline_throughput=baseline_throughput,
        residency=cfg.residency,
        wakeup=cfg.wakeup,
    )


def window_boundaries(duration_slots: int, warmup: int, cadence: int) -> List[int]:
    """Slot indices (exclusive ends) at which the controller runs."""
    out = []
    b = warmup
    while b <= duration_slots:
        out.append(b)
        b += cadence
    return out


@dataclass
class RunReport:
    scenario: str
    policy: str
    seed: int
    avg_power: float
    throughput: float
    deadline_misses: int
    transitions: int
    ctx_switches: int
    mean_ipc: float
    mean_mpki: float
    duration_slots: int
    core_series: List[Tuple[int, Dict[int, CoreStats]]]
    thread_summary: Dict[int, ThreadStats]
    diagnostics: Dict[str, int]
    plan_trace: List[Tuple[int, SchedulingPlan]]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "policy": self.policy,
            "seed": self.seed,
            "avg_power": self.avg_power,
            "throughput": self.throughput,
            "deadline_misses": self.deadline_misses,
            "transitions": self.transitions,
            "ctx_switches": self.ctx_switches,
            "mean_ipc": self.mean_ipc,
            "mean_mpki": self.mean_mpki,
            "duration_slots": self.duration_slots,
            "core_series": [
                [slot, {str(c): asdict(s) for c, s in cores.items()}]
                for slot, cores in self.core_series
            ],
            "thread_summary": {str(t): asdict(s) for t, s in self.thread_summary.items()},
            "diagnostics": dict(sorted(self.diagnostics.items())),
            "plan_trace": [[slot, plan.to_text()] for slot, plan in self.plan_trace],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def mean_core_metric(self, name: str, skip: int = 0) -> float:
        """Mean over windows (after ``skip``) and cores of a CoreStats field."""
        vals = [
            getattr(s, name)
            for _, cores in self.core_series[skip:]
            for s in cores.values()
        ]
        return float(np.mean(vals)) if vals else 0.0


def run_scenario(
    cfg: ScenarioConfig,
    policy,
    controller_cfg: Optional[ControllerConfig] = None,
    on_records: Optional[Callable[[List[TelemetryRecord]], None]] = None,
) -> RunReport:
    """Simulate ``cfg`` under one policy and summarise the run.

    The first ``warmup_slots`` run at kernel defaults and set the throughput
    baseline; afterwards the controller decides every ``cadence_slots`` from
    the telemetry the simulator emits. Plans take effect at slot boundaries.
    """
    kind = PolicyKind.parse(policy) if isinstance(policy, str) else PolicyKind(policy)
    cfg = inject_background(cfg)
    ccfg = controller_cfg or controller_config_for(cfg)
    sim = Simulator(cfg)
    ids = sim.ids
    fg = [t.id for t in cfg.threads if not t.background]
    ctrl = Controller(ccfg, kind, ids, cfg.cores)
    plan = ctrl.plan
    tti_ns = cfg.tti_ns
    boundaries = window_boundaries(cfg.duration_slots, ccfg.warmup_slots, ccfg.cadence_slots)
    next_b = 0

    window: List[TelemetryRecord] = []
    win_start = 0
    win_bits = 0
    win_latency = {t: 0.0 for t in fg}
    baseline_tp = None

    power_sum = 0.0
    bits_total = 0
    misses = 0
    transitions = 0
    totals: Dict[int, List[int]] = {t: [0] * 5 for t in ids}
    core_series = []
    clamp_events = 0

    for slot in range(cfg.duration_slots):
        out = sim.step_slot(plan)
        recs = sim.emit_telemetry()
        if on_records is not None:
            on_records(recs)
        power_sum += out.slot_power
        bits_total += out.bits_delivered
        win_bits += out.bits_delivered
        transitions += out.transitions
        for t in fg:
            if not out.deadline_met[t]:
                misses += 1
            if out.completion[t] > win_latency[t]:
                win_latency[t] = out.completion[t]
        for r in recs:
            acc = totals[r.thread]
            acc[0] += r.runtime_ns
            acc[1] += r.cycles
            acc[2] += r.instructions
            acc[3] += r.llc_misses
            acc[4] += r.ctx_switches
        window.extend(recs)

        if next_b < len(boundaries) and slot + 1 == boundaries[next_b]:
            end = slot + 1
            n_slots = end - win_start
            window_ns = n_slots * tti_ns
            stats = aggregate_window(window, window_ns)
            rollup = rollup_records(window, window_ns, cfg.cores)
            clamp_events += sum(1 for s in rollup.values() if s.clamped)
            core_series.append((end, rollup))
            tp = win_bits / (n_slots * cfg.tti)
            if baseline_tp is None:
                baseline_tp = tp
                report = None
            else:
                fg_plan = SchedulingPlan(
                    {t: plan.affinity[t] for t in fg}, plan.freq, plan.isolated, plan.pinned
                )
                report = check_constraints(
                    constraint_config(cfg, baseline_tp), fg_plan, win_latency, tp
                )
            plan = ctrl.on_window(stats, rollup, end, report)
            next_b += 1
            window = []
            win_start = end
            win_bits = 0
            win_latency = {t: 0.0 for t in fg}

    duration_ns = cfg.duration_slots * tti_ns
    summary = {}
    for t in ids:
        rt, cyc, ins, mis, cs = totals[t]
        summary[t] = ThreadStats(
            utilization=min(1.0, rt / duration_ns),
            ipc=ins / cyc if cyc else 0.0,
            mpki=1000.0 * mis / ins if ins else 0.0,
            ctx_rate=cs / (duration_ns * 1e-9),
            window_ns=duration_ns,
            runtime_ns=rt,
            cycles=cyc,
            instructions=ins,
            llc_misses=mis,
            ctx_switches=cs,
        )
    cyc = sum(v[1] for v in totals.values())
    ins = sum(v[2] for v in totals.values())
    mis = sum(v[3] for v in totals.values())
    return RunReport(
        scenario=cfg.name,
        policy=kind.value,
        seed=cfg.seed,
        avg_power=power_sum / cfg.duration_slots,
        throughput=bits_total / (cfg.duration_slots * cfg.tti),
        deadline_misses=misses,
        transitions=transitions,
        ctx_switches=sum(v[4] for v in totals.values()),
        mean_ipc=ins / cyc if cyc else 0.0,
        mean_mpki=1000.0 * mis / ins if ins else 0.0,
        duration_slots=cfg.duration_slots,
        core_series=core_series,
        thread_summary=summary,
        diagnostics={
            "clamp_events": clamp_events,
            "failsafe": ctrl.failsafe,
            "rollbacks": ctrl.rollbacks,
            "escalations": ctrl.escalations,
        },
        plan_trace=list(ctrl.trace),
    )
