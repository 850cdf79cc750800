"""Rule-based CPU orchestration: threshold governor, affinity packing, rollback.

The controller turns one telemetry window into a :class:`SchedulingPlan`.
Four policies are supported:

* ``baseline``  all cores at f_max, threads left to the kernel, nothing parked
* ``static``    packed affinity computed once, then frozen; all cores at f_max
* ``ondemand``  threads left to the kernel; per-core threshold governor
* ``combined``  packed affinity refreshed every window, governor, parking
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

from .errors import ConfigError
from .model import (
    ConstraintConfig,
    ConstraintReport,
    CoreId,
    FrequencyLevels,
    SchedulingPlan,
    ThreadId,
)
from .telemetry import CoreStats, ThreadStats

log = logging.getLogger(__name__)

# core utilisation treated as "demand not fully served"
SATURATED = 0.999
# weight of the previous demand estimate when the thread was fully served
DEMAND_MEMORY = 0.5


class PolicyKind(str, enum.Enum):
    BASELINE = "baseline"
    STATIC_AFFINITY = "static"
    ON_DEMAND_FREQ = "ondemand"
    COMBINED = "combined"

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "baseline": cls.BASELINE,
            "i": cls.BASELINE,
            "static": cls.STATIC_AFFINITY,
            "staticaffinity": cls.STATIC_AFFINITY,
            "ii": cls.STATIC_AFFINITY,
            "ondemand": cls.ON_DEMAND_FREQ,
            "ondemandfreq": cls.ON_DEMAND_FREQ,
            "iii": cls.ON_DEMAND_FREQ,
            "combined": cls.COMBINED,
            "iv": cls.COMBINED,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown policy {name!r}") from None


ALL_POLICIES = (
    PolicyKind.BASELINE,
    PolicyKind.STATIC_AFFINITY,
    PolicyKind.ON_DEMAND_FREQ,
    PolicyKind.COMBINED,
)


@dataclass(frozen=True)
class ControllerConfig:
    levels: FrequencyLevels
    cadence_slots: int = 100
    up_threshold: float = 0.80
    down_threshold: float = 0.30
    headroom: float = 0.85
    min_dwell_slots: int = 50
    mpki_hot: float = 10.0
    delta: float = 0.05
    warmup_slots: int = 50
    # packing reference frequency; None means f_min
    pack_ghz: Optional[float] = None
    # busy cores are not slowed below this level (None: no floor)
    floor_ghz: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.down_threshold < self.up_threshold <= 1:
            raise ConfigError("need 0 < down_threshold < up_threshold <= 1")
        if not 0 < self.headroom <= 1:
            raise ConfigError("headroom must lie in (0, 1]")
        if self.cadence_slots < 1 or self.warmup_slots < 1:
            raise ConfigError("cadence_slots and warmup_slots must be >= 1")
        if self.min_dwell_slots < 0:
            raise ConfigError("min_dwell_slots must be >= 0")
        for name in ("pack_ghz", "floor_ghz"):
            value = getattr(self, name)
            if value is not None and value not in self.levels:
                raise ConfigError(f"{name} {value} is not a configured level")

    def check_dwell(self, constraints: ConstraintConfig):
        """The dwell guard must cover the slowest power-state transition."""
        if self.min_dwell_slots * constraints.tti < max(constraints.residency, constraints.wakeup):
            raise ConfigError(
                "min_dwell_slots * tti shorter than max(residency, wakeup)"
            )

    @classmethod
    def from_overrides(cls, levels: FrequencyLevels, overrides: Mapping[str, float]):
        ints = {"cadence_slots", "min_dwell_slots", "warmup_slots"}
        floats = {"up_threshold", "down_threshold", "headroom", "mpki_hot", "delta", "pack_ghz", "floor_ghz"}
        kwargs = {}
        for key, value in overrides.items():
            if key in ints:
                kwargs[key] = int(value)
            elif key in floats:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown controller key {key!r}")
        return cls(levels=levels, **kwargs)


def governor_step(
    core: CoreStats, current_f: float, cfg: ControllerConfig, dwell_age: int
) -> float:
    """One threshold-governor decision for one core.

    Frequency is held while the dwell guard is active and inside the
    hysteresis band; otherwise it moves a single level.
    """
    if dwell_age < cfg.min_dwell_slots:
        return current_f
    if core.utilization > cfg.up_threshold:
        return cfg.levels.up(current_f)
    if core.utilization < cfg.down_threshold:
        return cfg.levels.down(current_f)
    return current_f


def _pack(
    items: Sequence[Tuple[ThreadId, float, bool]], n_cores: int, cap: float
) -> Optional[Tuple[Dict[ThreadId, int], List[float]]]:
    """First-fit decreasing into at most ``n_cores`` bins of size ``cap``.

    ``items`` are ``(thread, util, hot)``. Returns ``None`` when some thread
    cannot be placed.
    """
    order = sorted(items, key=lambda it: (-it[1], not it[2], it[0]))
    loads: List[float] = []
    hot: List[bool] = []
    mapping: Dict[ThreadId, int] = {}
    eps = 1e-12
    for tid, util, is_hot in order:
        spare = len(loads) < n_cores
        target = None
        for i, load in enumerate(loads):
            if is_hot and hot[i] and spare:
                continue
            if load + util <= cap + eps:
                target = i
                break
        if target is None:
            if not spare or util > cap + eps:
                return None
            loads.append(0.0)
            hot.append(False)
            target = len(loads) - 1
        loads[target] += util
        hot[target] = hot[target] or is_hot
        mapping[tid] = target
    return mapping, loads


def _pack_relaxed(
    items: Sequence[Tuple[ThreadId, float, bool]], n_cores: int, headroom: float
) -> Tuple[Dict[ThreadId, int], bool]:
    """Pack with ``headroom``, then 1.0, then overflow onto the last core.

    The flag tells whether the configured headroom had to be given up.
    """
    for cap in (headroom, 1.0):
        res = _pack(items, n_cores, cap)
        if res is not None:
            return res[0], cap != headroom
    order = sorted(items, key=lambda it: (-it[1], not it[2], it[0]))
    loads = [0.0] * n_cores
    mapping = {}
    opened = 0
    for tid, util, _ in order:
        target = next((i for i in range(opened) if loads[i] + util <= 1.0 + 1e-12), None)
        if target is None:
            if opened < n_cores:
                target = opened
                opened += 1
            else:
                target = n_cores - 1
        loads[target] += util
        mapping[tid] = target
    return mapping, True


def affinity_cluster(
    stats: Mapping[ThreadId, ThreadStats], n_cores: int, cfg: ControllerConfig
) -> Tuple[Dict[ThreadId, CoreId], Set[CoreId]]:
    """Pack threads onto as few cores as headroom allows; the rest are parked."""
    if n_cores < 1:
        raise ValueError("n_cores must be >= 1")
    items = [(t, s.utilization, s.mpki >= cfg.mpki_hot) for t, s in stats.items()]
    mapping, _ = _pack_relaxed(items, n_cores, cfg.headroom)
    used = set(mapping.values())
    return mapping, {c for c in range(n_cores) if c not in used}


def _zero_core(core: CoreId) -> CoreStats:
    return CoreStats(core=core, utilization=0.0, ipc=0.0, mpki=0.0, ctx_rate=0.0, window_ns=0)


def _predicted_core(core: CoreId, util: float) -> CoreStats:
    return CoreStats(core=core, utilization=util, ipc=0.0, mpki=0.0, ctx_rate=0.0, window_ns=0)


def baseline_plan(
    threads: Sequence[ThreadId], cores: Sequence[CoreId], levels: FrequencyLevels,
    hint: Optional[Mapping[ThreadId, CoreId]] = None,
) -> SchedulingPlan:
    """Kernel-default placement at f_max with nothing parked."""
    cores = list(cores)
    if hint is not None and all(t in hint and hint[t] in cores for t in threads):
        affinity = {t: hint[t] for t in threads}
    else:
        affinity = {t: cores[i % len(cores)] for i, t in enumerate(sorted(threads))}
    return SchedulingPlan(affinity, {c: levels.f_max for c in cores}, frozenset(), pinned=False)


def _fits(
    affinity: Mapping[ThreadId, CoreId], demand: Mapping[ThreadId, float], cap_ghz: float
) -> bool:
    load: Dict[CoreId, float] = {}
    for t, c in affinity.items():
        load[c] = load.get(c, 0.0) + demand[t]
    return all(v <= cap_ghz + 1e-12 for v in load.values())


def _demand(stats, override=None) -> Dict[ThreadId, float]:
    if override is None:
        return {t: s.demand_ghz for t, s in stats.items()}
    return {t: override.get(t, s.demand_ghz) for t, s in stats.items()}


def _combined_mapping(
    stats: Mapping[ThreadId, ThreadStats],
    cores: Sequence[CoreId],
    cfg: ControllerConfig,
    current: Optional[SchedulingPlan] = None,
    demand: Optional[Mapping[ThreadId, float]] = None,
) -> Tuple[Dict[ThreadId, CoreId], float]:
    # demand in GHz-equivalents is frequency independent; pack it against the
    # capacity of a reference level, moving the reference up until it fits
    levels = cfg.levels
    ref = cfg.pack_ghz if cfg.pack_ghz is not None else levels.f_min
    demand = _demand(stats, demand)
    hot = {t: s.mpki >= cfg.mpki_hot for t, s in stats.items()}
    # an existing pinned mapping that still fits is kept: every repack costs
    # migrations and cold caches
    if (
        current is not None
        and current.pinned
        and set(current.affinity) == set(demand)
        and not any(c in current.isolated for c in current.affinity.values())
    ):
        for f in levels.ghz[levels.index(ref):]:
            if _fits(current.affinity, demand, f * cfg.headroom):
                return dict(current.affinity), f
            if _pack([(t, demand[t] / f, hot[t]) for t in demand], len(cores), cfg.headroom):
                break
    mapping = None
    for f in levels.ghz[levels.index(ref):]:
        items = [(t, demand[t] / f, hot[t]) for t in demand]
        res = _pack(items, len(cores), cfg.headroom)
        if res is not None:
            mapping = res[0]
            ref = f
            break
    if mapping is None:
        ref = levels.f_max
        items = [(t, demand[t] / ref, hot[t]) for t in demand]
        mapping, _ = _pack_relaxed(items, len(cores), cfg.headroom)
    return {t: cores[i] for t, i in mapping.items()}, ref


def settle_frequency(load_ghz: float, start: float, cfg: ControllerConfig) -> float:
    """Apply :func:`governor_step` to a predicted load until it stops moving.

    ``load_ghz`` is the planned cycle demand of a core in GHz-equivalents.
    The walk starts at ``start`` and never reverses direction, so it ends
    after at most ``len(levels)`` steps. A busy core is not taken below
    ``cfg.floor_ghz``: under that level each cycle costs more energy.
    """
    f = start
    direction = 0
    floor = cfg.floor_ghz if cfg.floor_ghz is not None and load_ghz > 0 else None
    for _ in range(len(cfg.levels)):
        nxt = governor_step(_predicted_core(-1, load_ghz / f), f, cfg, cfg.min_dwell_slots)
        if floor is not None and nxt < floor:
            break
        step = (nxt > f) - (nxt < f)
        if step == 0 or (direction and step != direction):
            break
        direction = step
        f = nxt
    return f


def start_level(load_ghz: float, cfg: ControllerConfig) -> float:
    """Lowest level at or above the floor that keeps ``load_ghz`` under the
    up threshold; the governor's resting point approached from above."""
    levels = cfg.levels
    lo = cfg.floor_ghz if cfg.floor_ghz is not None else levels.f_min
    for f in levels.ghz[levels.index(lo):]:
        if load_ghz <= cfg.up_threshold * f:
            return f
    return levels.f_max


def _decide(stats, rollup, current, cfg, kind, dwell_ages, demand=None):
    levels = cfg.levels
    cores = current.cores
    threads = sorted(stats)

    def age(c):
        return dwell_ages.get(c, cfg.min_dwell_slots) if dwell_ages is not None else cfg.min_dwell_slots

    if kind is PolicyKind.BASELINE:
        return baseline_plan(threads, cores, levels, current.affinity)

    if kind is PolicyKind.STATIC_AFFINITY:
        if current.pinned and set(current.affinity) == set(threads):
            affinity = dict(current.affinity)
        else:
            affinity, _ = _combined_mapping(stats, cores, cfg, demand=demand)
        return SchedulingPlan(affinity, {c: levels.f_max for c in cores}, frozenset(), pinned=True)

    if kind is PolicyKind.ON_DEMAND_FREQ:
        freq = {
            c: governor_step(rollup.get(c) or _zero_core(c), current.freq[c], cfg, age(c))
            for c in cores
        }
        hint = {t: current.affinity.get(t, cores[0]) for t in threads}
        return SchedulingPlan(hint, freq, frozenset(), pinned=False)

    if kind is PolicyKind.COMBINED:
        demand = _demand(stats, demand)
        affinity, _ = _combined_mapping(stats, cores, cfg, current, demand)
        load = {c: 0.0 for c in cores}
        for t, c in affinity.items():
            load[c] += demand[t]
        used = set(affinity.values())
        freq = {}
        for c in cores:
            f = current.freq[c]
            if c not in used or age(c) < cfg.min_dwell_slots:
                freq[c] = f
            else:
                freq[c] = settle_frequency(load[c], start_level(load[c], cfg), cfg)
        isolated = frozenset(c for c in cores if c not in used)
        return SchedulingPlan(affinity, freq, isolated, pinned=True)

    raise ValueError(f"unknown policy kind {kind!r}")


def decide(
    stats: Mapping[ThreadId, ThreadStats],
    rollup: Mapping[CoreId, CoreStats],
    current: SchedulingPlan,
    cfg: ControllerConfig,
    kind: PolicyKind,
    dwell_ages: Optional[Mapping[CoreId, int]] = None,
    demand: Optional[Mapping[ThreadId, float]] = None,
) -> SchedulingPlan:
    """Map one telemetry window to the next plan.

    ``dwell_ages`` gives slots since each core's last frequency change
    (missing cores count as settled). ``demand`` optionally replaces the
    measured per-thread demand (GHz-equivalents) used for packing. On any
    internal failure the current plan is returned unchanged.
    """
    try:
        plan = _decide(stats, rollup, current, cfg, kind, dwell_ages, demand)
        plan.validate(threads=stats, levels=cfg.levels)
        return plan
    except Exception:
        log.warning("decide failed, keeping current plan", exc_info=True)
        return current


def recovery_plan(
    current: SchedulingPlan,
    levels: FrequencyLevels,
    loads: Optional[Mapping[CoreId, float]] = None,
) -> SchedulingPlan:
    """Raise every active core one level and bring one parked core back.

    The revived core (lowest id) takes one thread from the most loaded
    shared core; load is measured by ``loads`` when given, else by thread
    count.
    """
    freq = {
        c: (f if c in current.isolated else levels.up(f)) for c, f in current.freq.items()
    }
    affinity = dict(current.affinity)
    isolated = set(current.isolated)
    if isolated:
        members: Dict[CoreId, List[ThreadId]] = {}
        for t, c in affinity.items():
            members.setdefault(c, []).append(t)
        shared = [c for c, ts in members.items() if len(ts) > 1]
        if shared:
            weight = (lambda c: (loads.get(c, 0.0), -c)) if loads else (lambda c: (len(members[c]), -c))
            donor = max(shared, key=weight)
            revived = min(isolated)
            isolated.discard(revived)
            affinity[max(members[donor])] = revived
            freq[revived] = freq[donor]
    return SchedulingPlan(affinity, freq, frozenset(isolated), pinned=current.pinned)


def enforce_or_rollback(
    candidate: SchedulingPlan,
    last_report: Optional[ConstraintReport],
    current: SchedulingPlan,
    levels: FrequencyLevels,
    streak: int = 1,
    loads: Optional[Mapping[CoreId, float]] = None,
) -> SchedulingPlan:
    """Gate a candidate plan on the outcome of the last window.

    ``streak`` counts consecutive violating windows including this one. A
    single violation yields :func:`recovery_plan` of the current plan; two or
    more force the kernel-default plan at f_max until a clean window.
    """
    if last_report is None or (not last_report.latency_violated and last_report.throughput_ok):
        return candidate
    if streak >= 2:
        return baseline_plan(list(current.affinity), current.cores, levels, current.affinity)
    return recovery_plan(current, levels, loads)


@dataclass
class Controller:
    """Stateful wrapper running the decision loop for one host."""

    cfg: ControllerConfig
    kind: PolicyKind
    threads: Sequence[ThreadId]
    cores: Sequence[CoreId]
    plan: SchedulingPlan = None
    streak: int = 0
    failsafe: int = 0
    rollbacks: int = 0
    escalations: int = 0
    last_change: Dict[CoreId, int] = field(default_factory=dict)
    trace: List[Tuple[int, SchedulingPlan]] = field(default_factory=list)
    demand: Dict[ThreadId, float] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = PolicyKind(self.kind)
        if self.plan is None:
            self.plan = baseline_plan(self.threads, self.cores, self.cfg.levels)

    def dwell_ages(self, slot: int) -> Dict[CoreId, int]:
        never = slot + self.cfg.min_dwell_slots
        return {c: slot - self.last_change.get(c, -never) for c in self.cores}

    def update_demand(
        self, stats: Mapping[ThreadId, ThreadStats], rollup: Mapping[CoreId, CoreStats]
    ) -> Dict[ThreadId, float]:
        """Refresh the per-thread demand estimates from one window.

        Executed cycles understate the demand of threads on a saturated core,
        so there the estimate grows by ``1 / headroom`` per window until the
        packing separates them. Elsewhere it follows the measurement, keeping
        half of the previous estimate as a short memory.
        """
        current = self.plan
        for t, s in stats.items():
            obs = s.demand_ghz
            prev = self.demand.get(t, 0.0)
            core = current.affinity.get(t)
            saturated = (
                current.pinned
                and core in rollup
                and rollup[core].raw_utilization >= SATURATED
            )
            if saturated:
                self.demand[t] = max(obs, prev) / self.cfg.headroom
            else:
                self.demand[t] = max(obs, DEMAND_MEMORY * prev)
        return self.demand

    def on_window(
        self,
        stats: Mapping[ThreadId, ThreadStats],
        rollup: Mapping[CoreId, CoreStats],
        slot: int,
        report: Optional[ConstraintReport] = None,
    ) -> SchedulingPlan:
        """Decide the plan applied from ``slot`` on."""
        current = self.plan
        ages = self.dwell_ages(slot)
        demand = self.update_demand(stats, rollup)
        try:
            candidate = _decide(stats, rollup, current, self.cfg, self.kind, ages, demand)
            candidate.validate(threads=self.threads, levels=self.cfg.levels)
        except Exception:
            log.warning("decide failed at slot %d, keeping current plan", slot, exc_info=True)
            self.failsafe += 1
            candidate = current
        if report is not None:
            violated = report.latency_violated or not report.throughput_ok
            self.streak = self.streak + 1 if violated else 0
            if violated and self.kind is not PolicyKind.BASELINE:
                loads = {c: s.utilization for c, s in rollup.items()}
                candidate = enforce_or_rollback(
                    candidate, report, current, self.cfg.levels, self.streak, loads
                )
                if self.streak >= 2:
                    self.escalations += 1
                else:
                    self.rollbacks += 1
        # the dwell guard has the last word on every frequency change
        freq = dict(candidate.freq)
        for c, f in freq.items():
            if f != current.freq[c]:
                if ages[c] < self.cfg.min_dwell_slots:
                    freq[c] = current.freq[c]
                else:
                    self.last_change[c] = slot
        if freq != candidate.freq:
            candidate = SchedulingPlan(candidate.affinity, freq, candidate.isolated, candidate.pinned)
        self.plan = candidate
        self.trace.append((slot, candidate))
        return candidate
