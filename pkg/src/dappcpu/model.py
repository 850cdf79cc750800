"""Power model, energy objective and constraint predicates.

Everything here is a pure function over immutable values. Frequencies are
plain floats in GHz; a :class:`FrequencyLevels` instance is the discrete
P-state ladder they must be drawn from.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import (
    InvalidPlanError,
    MalformedInputError,
    NonPhysicalFitError,
    UnderdeterminedFitError,
)

ThreadId = int
CoreId = int


@dataclass(frozen=True)
class PowerModelParams:
    """Per-core power ``P(f) = p_static + k_dyn * f**2`` (W, GHz).

    ``p_idle`` is what a parked (isolated) core draws.
    """

    p_static: float
    k_dyn: float
    p_idle: float = 0.0

    def __post_init__(self):
        if not (self.p_static >= self.p_idle >= 0):
            raise MalformedInputError(
                f"need p_static >= p_idle >= 0, got {self.p_static}, {self.p_idle}"
            )
        if not self.k_dyn > 0:
            raise MalformedInputError(f"k_dyn must be positive, got {self.k_dyn}")


@dataclass(frozen=True)
class FrequencyLevels:
    """Strictly increasing, non-empty set of operating frequencies in GHz."""

    ghz: Tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(f) for f in self.ghz)
        if not levels:
            raise MalformedInputError("frequency level set is empty")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise MalformedInputError(f"levels not strictly increasing: {levels}")
        if levels[0] < 0:
            raise MalformedInputError("negative frequency level")
        object.__setattr__(self, "ghz", levels)

    @property
    def f_min(self) -> float:
        return self.ghz[0]

    @property
    def f_max(self) -> float:
        return self.ghz[-1]

    def __len__(self):
        return len(self.ghz)

    def __iter__(self):
        return iter(self.ghz)

    def __contains__(self, f) -> bool:
        i = bisect.bisect_left(self.ghz, f)
        return i < len(self.ghz) and self.ghz[i] == f

    def index(self, f: float) -> int:
        i = bisect.bisect_left(self.ghz, f)
        if i == len(self.ghz) or self.ghz[i] != f:
            raise MalformedInputError(f"{f} GHz is not a configured level")
        return i

    def up(self, f: float) -> float:
        return self.ghz[min(self.index(f) + 1, len(self.ghz) - 1)]

    def down(self, f: float) -> float:
        return self.ghz[max(self.index(f) - 1, 0)]

    def lowest_at_least(self, f: float) -> float:
        """Smallest level >= ``f``, saturating at ``f_max``."""
        i = bisect.bisect_left(self.ghz, f)
        return self.ghz[min(i, len(self.ghz) - 1)]


@dataclass(frozen=True)
class SchedulingPlan:
    """Affinity map, per-core frequency and the set of parked cores.

    ``pinned=False`` marks the affinity as a placement hint only: the host
    scheduler is free to move threads every slot (kernel default behaviour).
    """

    affinity: Mapping[ThreadId, CoreId]
    freq: Mapping[CoreId, float]
    isolated: FrozenSet[CoreId] = frozenset()
    pinned: bool = True

    def __post_init__(self):
        object.__setattr__(self, "affinity", dict(sorted(self.affinity.items())))
        object.__setattr__(self, "freq", dict(sorted(self.freq.items())))
        object.__setattr__(self, "isolated", frozenset(self.isolated))

    @property
    def cores(self) -> List[CoreId]:
        return list(self.freq)

    @property
    def active_cores(self) -> List[CoreId]:
        return [c for c in self.freq if c not in self.isolated]

    def isolation_violations(self) -> List[ThreadId]:
        return [t for t, c in self.affinity.items() if c in self.isolated]

    def validate(self, threads: Iterable[ThreadId] = None, levels: FrequencyLevels = None):
        """Raise :class:`InvalidPlanError` if any plan invariant is broken."""
        bad = self.isolation_violations()
        if bad:
            raise InvalidPlanError(f"threads {bad} mapped to isolated cores")
        unknown = [c for c in self.affinity.values() if c not in self.freq]
        if unknown:
            raise InvalidPlanError(f"affinity targets without a frequency: {sorted(set(unknown))}")
        if not self.isolated <= set(self.freq):
            raise InvalidPlanError("isolated set names unknown cores")
        if threads is not None:
            missing = set(threads) - set(self.affinity)
            if missing:
                raise InvalidPlanError(f"affinity not total, missing {sorted(missing)}")
        if levels is not None:
            off = [c for c, f in self.freq.items() if f not in levels]
            if off:
                raise InvalidPlanError(f"cores {off} at frequencies outside the level set")

    def key(self) -> tuple:
        """Canonical sortable form, used for deterministic tie-breaking."""
        return (
            tuple(self.affinity.items()),
            tuple(self.freq.items()),
            tuple(sorted(self.isolated)),
            self.pinned,
        )

    def to_text(self) -> str:
        aff = ";".join(f"{t}:{c}" for t, c in self.affinity.items())
        fr = ";".join(f"{c}:{f:g}" for c, f in self.freq.items())
        iso = ";".join(str(c) for c in sorted(self.isolated))
        return f"{aff},{fr},{iso},{int(self.pinned)}"


@dataclass(frozen=True)
class ConstraintConfig:
    tti: float
    delta: float = 0.05
    baseline_throughput: float = 0.0
    residency: float = 0.0
    wakeup: float = 0.0

    def __post_init__(self):
        if not self.tti > 0:
            raise MalformedInputError("tti must be positive")
        if not 0 <= self.delta < 1:
            raise MalformedInputError("delta must lie in [0, 1)")
        if self.residency < 0 or self.wakeup < 0:
            raise MalformedInputError("residency and wakeup must be non-negative")


@dataclass(frozen=True)
class ConstraintReport:
    latency_ok: Dict[ThreadId, bool]
    throughput_ok: bool
    isolation_ok: bool
    worst_latency: float
    throughput_deviation: float
    diagnostics: Tuple[str, ...] = field(default=())

    @property
    def feasible(self) -> bool:
        return all(self.latency_ok.values()) and self.throughput_ok and self.isolation_ok

    @property
    def latency_violated(self) -> bool:
        return not all(self.latency_ok.values())


def core_power(params: PowerModelParams, f: float) -> float:
    return params.p_static + params.k_dyn * f * f


def energy_per_cycle(params: PowerModelParams, f: float) -> float:
    """Joules per 1e9 cycles at ``f`` when the core is busy: ``P(f) / f``."""
    return core_power(params, f) / f


def efficient_level(params: PowerModelParams, levels: FrequencyLevels) -> float:
    """Level minimising energy per executed cycle (ties go to the lower level)."""
    candidates = [f for f in levels if f > 0]
    if not candidates:
        return levels.f_min
    return min(candidates, key=lambda f: (energy_per_cycle(params, f), f))


def plan_energy(
    params: PowerModelParams, plan: SchedulingPlan, util: Mapping[CoreId, float]
) -> float:
    """Utilisation-weighted power of active cores plus idle draw of parked ones."""
    total = 0.0
    for core, f in plan.freq.items():
        if core in plan.isolated:
            total += params.p_idle
            continue
        try:
            u = util[core]
        except KeyError:
            raise MalformedInputError(f"no utilisation for active core {core}") from None
        if not 0.0 <= u <= 1.0:
            raise MalformedInputError(f"utilisation {u} of core {core} outside [0, 1]")
        total += core_power(params, f) * u
    return total


def fit_power_model(
    samples: Sequence[Tuple[float, float]], p_idle: float = 0.0
) -> Tuple[PowerModelParams, float]:
    """Least-squares fit of ``P = p_static + k * f**2``.

    Returns the fitted parameters and the residual sum of squares.
    """
    if len({float(f) for f, _ in samples}) < 2:
        raise UnderdeterminedFitError("need at least two distinct frequencies")
    f = np.array([s[0] for s in samples], dtype=float)
    p = np.array([s[1] for s in samples], dtype=float)
    design = np.column_stack([np.ones_like(f), f * f])
    (p_s, k), *_ = np.linalg.lstsq(design, p, rcond=None)
    if not k > 0:
        raise NonPhysicalFitError(f"fitted k = {k:.6g} is not positive")
    rss = float(np.sum((design @ np.array([p_s, k]) - p) ** 2))
    p_s = float(p_s)
    if p_s < p_idle:
        raise NonPhysicalFitError(f"fitted p_static {p_s:.6g} below p_idle {p_idle}")
    return PowerModelParams(p_s, float(k), p_idle), rss


def check_constraints(
    cfg: ConstraintConfig,
    plan: SchedulingPlan,
    latencies: Mapping[ThreadId, float],
    measured_throughput: float,
) -> ConstraintReport:
    diagnostics = []
    latency_ok = {}
    worst = 0.0
    for thread in plan.affinity:
        lat = latencies[thread]
        latency_ok[thread] = lat <= cfg.tti
        worst = max(worst, lat)
    bad = plan.isolation_violations()
    if bad:
        diagnostics.append(f"threads {bad} pinned to isolated cores")
    base = cfg.baseline_throughput
    dev = abs(measured_throughput - base)
    throughput_ok = dev <= cfg.delta * base
    return ConstraintReport(
        latency_ok=latency_ok,
        throughput_ok=throughput_ok,
        isolation_ok=not bad,
        worst_latency=worst,
        throughput_deviation=dev / base if base > 0 else 0.0,
        diagnostics=tuple(diagnostics),
    )


def dwell_feasible(cfg: ConstraintConfig) -> bool:
    """A power-state transition is usable only if it settles within one TTI."""
    return max(cfg.residency, cfg.wakeup) < cfg.tti
