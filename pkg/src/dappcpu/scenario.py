"""Simulated host description and its key-value file format.

A scenario file holds one ``key = value`` pair per line (``#`` starts a
comment). Keys are the :class:`ScenarioConfig` field names; grouped values
use dotted prefixes::

    n_cores = 8
    freq_levels = 0.8 1.2 1.6
    power.p_static = 1.8
    thread.0.cycles_per_slot = 400000
    controller.cadence_slots = 100
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple, Union

from .errors import ConfigError, DappError
from .model import FrequencyLevels, PowerModelParams

MAX_BACKGROUND_GNBS = 5

# One noisy-neighbour gNB: three threads given as (fraction of an f_max core
# per slot, demand jitter, memory intensity).
BACKGROUND_TEMPLATE: Tuple[Tuple[float, float, float], ...] = (
    (0.050, 0.10, 0.10),
    (0.035, 0.10, 0.06),
    (0.025, 0.10, 0.04),
)


@dataclass(frozen=True)
class ThreadProfile:
    id: int
    cycles_per_slot: float
    demand_jitter: float = 0.0
    memory_intensity: float = 0.0
    bits_per_slot: int = 0
    background: bool = False

    def __post_init__(self):
        if self.cycles_per_slot < 0:
            raise ConfigError(f"thread {self.id}: negative cycles_per_slot")
        if not 0.0 <= self.memory_intensity <= 1.0:
            raise ConfigError(f"thread {self.id}: memory_intensity outside [0, 1]")
        if self.demand_jitter < 0:
            raise ConfigError(f"thread {self.id}: negative demand_jitter")


@dataclass(frozen=True)
class ScenarioConfig:
    n_cores: int
    threads: Tuple[ThreadProfile, ...]
    freq_levels: FrequencyLevels
    power: PowerModelParams
    tti: float = 1e-3
    ctx_switch_cycles: int = 2000
    migration_penalty_cycles: int = 20000
    migration_mpki_boost: Tuple[float, int] = (2.0, 5)
    switch_latency: float = 50e-6
    switch_energy: float = 1e-3
    gnb_background: int = 0
    seed: int = 0
    duration_slots: int = 1000
    name: str = "scenario"
    # synthetic micro-architecture
    ipc_peak: float = 2.4
    miss_rate_peak: float = 4.0
    stall_cycles_per_miss: int = 60
    max_switches_per_slot: int = 3
    # constraint inputs
    residency: float = 0.0
    wakeup: float = 0.0
    delta: float = 0.05
    controller: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "threads", tuple(self.threads))
        object.__setattr__(self, "controller", dict(self.controller))
        if self.n_cores < 1:
            raise ConfigError("n_cores must be >= 1")
        if self.duration_slots < 1:
            raise ConfigError("duration_slots must be >= 1")
        if not self.tti > 0:
            raise ConfigError("tti must be positive")
        if self.freq_levels.f_min <= 0:
            raise ConfigError("simulated frequency levels must be positive")
        ids = [t.id for t in self.threads]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate thread ids")
        factor, decay = self.migration_mpki_boost
        if factor < 1 or decay < 0:
            raise ConfigError("migration_mpki_boost needs factor >= 1 and decay >= 0")
        if self.max_switches_per_slot < 1:
            raise ConfigError("max_switches_per_slot must be >= 1")
        if not 0 <= self.gnb_background <= MAX_BACKGROUND_GNBS:
            raise ConfigError(f"gnb_background must lie in [0, {MAX_BACKGROUND_GNBS}]")

    @property
    def tti_ns(self) -> int:
        return int(round(self.tti * 1e9))

    @property
    def cores(self) -> List[int]:
        return list(range(self.n_cores))

    @property
    def foreground(self) -> List[ThreadProfile]:
        return [t for t in self.threads if not t.background]

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def inject_background(cfg: ScenarioConfig) -> ScenarioConfig:
    """Append ``gnb_background`` noisy-neighbour thread groups.

    Background threads from an earlier injection are dropped first, so the
    operation is idempotent.
    """
    if not 0 <= cfg.gnb_background <= MAX_BACKGROUND_GNBS:
        raise ConfigError(f"gnb_background must lie in [0, {MAX_BACKGROUND_GNBS}]")
    fg = [t for t in cfg.threads if not t.background]
    if cfg.gnb_background == 0 and len(fg) == len(cfg.threads):
        return cfg
    peak = cfg.freq_levels.f_max * 1e9 * cfg.tti
    next_id = max((t.id for t in fg), default=-1) + 1
    extra = []
    for _ in range(cfg.gnb_background):
        for share, jitter, mem in BACKGROUND_TEMPLATE:
            extra.append(
                ThreadProfile(
                    id=next_id,
                    cycles_per_slot=round(share * peak),
                    demand_jitter=jitter,
                    memory_intensity=mem,
                    bits_per_slot=0,
                    background=True,
                )
            )
            next_id += 1
    return cfg.replace(threads=tuple(fg + extra))


_SCALAR_TYPES = {
    "n_cores": int,
    "tti": float,
    "ctx_switch_cycles": int,
    "migration_penalty_cycles": int,
    "switch_latency": float,
    "switch_energy": float,
    "gnb_background": int,
    "seed": int,
    "duration_slots": int,
    "name": str,
    "ipc_peak": float,
    "miss_rate_peak": float,
    "stall_cycles_per_miss": int,
    "max_switches_per_slot": int,
    "residency": float,
    "wakeup": float,
    "delta": float,
}
_THREAD_TYPES = {
    "cycles_per_slot": float,
    "demand_jitter": float,
    "memory_intensity": float,
    "bits_per_slot": int,
    "background": lambda s: s.strip().lower() in ("1", "true", "yes"),
}
_POWER_KEYS = ("p_static", "k_dyn", "p_idle")


def _num(conv, key, text):
    try:
        return conv(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def parse_scenario(text: str) -> ScenarioConfig:
    values: Dict[str, object] = {}
    power: Dict[str, float] = {}
    threads: Dict[int, Dict[str, object]] = {}
    controller: Dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _SCALAR_TYPES:
            values[key] = _num(_SCALAR_TYPES[key], key, value)
        elif key == "freq_levels":
            try:
                values[key] = FrequencyLevels(
                    tuple(_num(float, key, v) for v in value.replace(",", " ").split())
                )
            except ConfigError:
                raise
            except DappError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from exc
        elif key == "migration_mpki_boost":
            parts = value.replace(",", " ").split()
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: migration_mpki_boost takes 'factor decay_slots'")
            values[key] = (_num(float, key, parts[0]), _num(int, key, parts[1]))
        elif key.startswith("power."):
            name = key[len("power."):]
            if name not in _POWER_KEYS:
                raise ConfigError(f"line {lineno}: unknown power key {name!r}")
            power[name] = _num(float, key, value)
        elif key.startswith("thread."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _THREAD_TYPES:
                raise ConfigError(f"line {lineno}: bad thread key {key!r}")
            tid = _num(int, key, parts[1])
            threads.setdefault(tid, {})[parts[2]] = _num(_THREAD_TYPES[parts[2]], key, value)
        elif key.startswith("controller."):
            controller[key[len("controller."):]] = _num(float, key, value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    for required in ("n_cores", "freq_levels"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")
    if "p_static" not in power or "k_dyn" not in power:
        raise ConfigError("power.p_static and power.k_dyn are required")
    for tid in sorted(threads):
        if "cycles_per_slot" not in threads[tid]:
            raise ConfigError(f"thread {tid}: cycles_per_slot missing")
    try:
        profiles = tuple(ThreadProfile(id=tid, **threads[tid]) for tid in sorted(threads))
        return ScenarioConfig(
            threads=profiles,
            power=PowerModelParams(**power),
            controller=controller,
            **values,
        )
    except ConfigError:
        raise
    except (DappError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text)


def dump_scenario(cfg: ScenarioConfig) -> str:
    out = []
    for key in _SCALAR_TYPES:
        out.append(f"{key} = {getattr(cfg, key)}")
    out.append("freq_levels = " + " ".join(f"{f:g}" for f in cfg.freq_levels))
    factor, decay = cfg.migration_mpki_boost
    out.append(f"migration_mpki_boost = {factor} {decay}")
    for name in _POWER_KEYS:
        out.append(f"power.{name} = {getattr(cfg.power, name)}")
    for t in cfg.threads:
        for name in _THREAD_TYPES:
            value = getattr(t, name)
            out.append(f"thread.{t.id}.{name} = {int(value) if isinstance(value, bool) else value}")
    for key, value in sorted(cfg.controller.items()):
        out.append(f"controller.{key} = {value}")
    return "\n".join(out) + "\n"
