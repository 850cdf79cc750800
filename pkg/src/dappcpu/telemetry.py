"""Per-thread counter records and the windowed metrics derived from them.

Wire format, one record per line, single-space separated base-10 unsigned
integers::

    ts_ns thread_id core_id cycles instructions llc_misses ctx_switches runtime_ns

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, TextIO

from .errors import InconsistentCountersError, MalformedLineError, UnmappedThreadError
from .model import CoreId, SchedulingPlan, ThreadId

log = logging.getLogger(__name__)

FIELDS = (
    "ts_ns",
    "thread",
    "core",
    "cycles",
    "instructions",
    "llc_misses",
    "ctx_switches",
    "runtime_ns",
)
DEFAULT_WINDOW_NS = 100_000_000

_UINT = re.compile(r"[0-9]+\Z")


class TelemetryRecord(NamedTuple):
    ts_ns: int
    thread: ThreadId
    core: CoreId
    cycles: int
    instructions: int
    llc_misses: int
    ctx_switches: int
    runtime_ns: int

    def to_line(self) -> str:
        return " ".join(str(v) for v in self)


@dataclass(frozen=True)
class ThreadStats:
    utilization: float
    ipc: float
    mpki: float
    ctx_rate: float
    window_ns: int
    # raw sums, kept so that ratios can be recombined without averaging ratios
    runtime_ns: int = 0
    cycles: int = 0
    instructions: int = 0
    llc_misses: int = 0
    ctx_switches: int = 0
    degenerate: bool = False
    clamped: bool = False

    @property
    def demand_ghz(self) -> float:
        """Executed cycles per nanosecond of window, i.e. GHz of one core."""
        return self.cycles / self.window_ns if self.window_ns else 0.0


@dataclass(frozen=True)
class CoreStats:
    core: CoreId
    utilization: float
    ipc: float
    mpki: float
    ctx_rate: float
    window_ns: int
    raw_utilization: float = 0.0
    runtime_ns: int = 0
    cycles: int = 0
    instructions: int = 0
    llc_misses: int = 0
    ctx_switches: int = 0
    n_threads: int = 0
    clamped: bool = False


def parse_record(line: str) -> TelemetryRecord:
    line = line.rstrip("\r\n")
    parts = line.split(" ")
    if len(parts) != len(FIELDS):
        raise MalformedLineError(
            f"expected {len(FIELDS)} fields, found {len(parts)}", offset=len(line.encode())
        )
    values = []
    offset = 0
    for idx, text in enumerate(parts):
        if not _UINT.match(text):
            raise MalformedLineError(
                f"field {FIELDS[idx]!r} is not an unsigned integer: {text!r}",
                offset=offset,
                field=idx,
            )
        values.append(int(text))
        offset += len(text.encode()) + 1
    return TelemetryRecord(*values)


def format_record(rec: TelemetryRecord) -> str:
    return rec.to_line()


def read_records(lines: Iterable[str]) -> Iterator[TelemetryRecord]:
    """Parse a stream, skipping comments and blank lines.

    Also enforces that a thread's on-CPU time never exceeds the wall time
    since its previous record.
    """
    last_ts: Dict[ThreadId, int] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rec = parse_record(line)
        except MalformedLineError as exc:
            exc.lineno = lineno
            raise
        prev = last_ts.get(rec.thread)
        if prev is not None:
            if rec.ts_ns < prev:
                raise MalformedLineError("timestamp goes backwards", field=0, lineno=lineno)
            if rec.runtime_ns > rec.ts_ns - prev:
                raise MalformedLineError(
                    "runtime exceeds interval since previous record",
                    offset=line.rfind(" ") + 1,
                    field=7,
                    lineno=lineno,
                )
        last_ts[rec.thread] = rec.ts_ns
        yield rec


def write_records(records: Iterable[TelemetryRecord], fh: TextIO, header: bool = True):
    if header:
        fh.write("# " + " ".join(FIELDS) + "\n")
    for rec in records:
        fh.write(rec.to_line() + "\n")


class _Sums:
    __slots__ = ("runtime", "cycles", "instr", "misses", "ctx", "threads")

    def __init__(self):
        self.runtime = self.cycles = self.instr = self.misses = self.ctx = 0
        self.threads = set()

    def add(self, rec: TelemetryRecord):
        self.runtime += rec.runtime_ns
        self.cycles += rec.cycles
        self.instr += rec.instructions
        self.misses += rec.llc_misses
        self.ctx += rec.ctx_switches
        self.threads.add(rec.thread)

    def ratios(self, who):
        if self.cycles == 0:
            if self.instr > 0:
                raise InconsistentCountersError(
                    f"{who}: {self.instr} instructions retired in zero cycles"
                )
            return 0.0, 0.0, True
        ipc = self.instr / self.cycles
        if self.instr == 0:
            return ipc, 0.0, True
        return ipc, 1000.0 * self.misses / self.instr, False


def _thread_stats(s: _Sums, window_ns: int, who) -> ThreadStats:
    ipc, mpki, degenerate = s.ratios(who)
    util = s.runtime / window_ns
    clamped = util > 1.0
    if clamped:
        log.debug("%s: utilisation %.6f clamped to 1", who, util)
    return ThreadStats(
        utilization=min(util, 1.0),
        ipc=ipc,
        mpki=mpki,
        ctx_rate=s.ctx / (window_ns * 1e-9),
        window_ns=window_ns,
        runtime_ns=s.runtime,
        cycles=s.cycles,
        instructions=s.instr,
        llc_misses=s.misses,
        ctx_switches=s.ctx,
        degenerate=degenerate,
        clamped=clamped,
    )


def _core_stats(core: CoreId, s: _Sums, window_ns: int) -> CoreStats:
    ipc, mpki, _ = s.ratios(f"core {core}")
    raw = s.runtime / window_ns
    return CoreStats(
        core=core,
        utilization=min(raw, 1.0),
        ipc=ipc,
        mpki=mpki,
        ctx_rate=s.ctx / (window_ns * 1e-9),
        window_ns=window_ns,
        raw_utilization=raw,
        runtime_ns=s.runtime,
        cycles=s.cycles,
        instructions=s.instr,
        llc_misses=s.misses,
        ctx_switches=s.ctx,
        n_threads=len(s.threads),
        clamped=raw > 1.0,
    )


def aggregate_window(records: Sequence[TelemetryRecord], window_ns: int) -> Dict[ThreadId, ThreadStats]:
    """Per-thread metrics over one window of records."""
    if window_ns <= 0:
        raise ValueError("window_ns must be positive")
    sums: Dict[ThreadId, _Sums] = {}
    for rec in records:
        s = sums.get(rec.thread)
        if s is None:
            s = sums[rec.thread] = _Sums()
        s.add(rec)
    return {t: _thread_stats(sums[t], window_ns, f"thread {t}") for t in sorted(sums)}


def per_core_rollup(
    stats: Mapping[ThreadId, ThreadStats],
    plan: SchedulingPlan,
) -> Dict[CoreId, CoreStats]:
    """Combine thread metrics onto the cores the plan maps them to.

    Every core named by the plan gets an entry, empty ones with zeros.
    """
    sums: Dict[CoreId, _Sums] = {c: _Sums() for c in plan.freq}
    window_ns = None
    for thread, st in stats.items():
        try:
            core = plan.affinity[thread]
        except KeyError:
            raise UnmappedThreadError(thread) from None
        window_ns = st.window_ns if window_ns is None else window_ns
        s = sums.setdefault(core, _Sums())
        s.runtime += st.runtime_ns
        s.cycles += st.cycles
        s.instr += st.instructions
        s.misses += st.llc_misses
        s.ctx += st.ctx_switches
        s.threads.add(thread)
    window_ns = window_ns or 1
    return {c: _core_stats(c, sums[c], window_ns) for c in sorted(sums)}


def rollup_records(
    records: Sequence[TelemetryRecord], window_ns: int, cores: Iterable[CoreId] = ()
) -> Dict[CoreId, CoreStats]:
    """Per-core metrics attributed by the core each record was observed on.

    Unlike :func:`per_core_rollup` this stays correct when threads migrate
    inside the window.
    """
    sums: Dict[CoreId, _Sums] = {c: _Sums() for c in cores}
    for rec in records:
        s = sums.get(rec.core)
        if s is None:
            s = sums[rec.core] = _Sums()
        s.add(rec)
    return {c: _core_stats(c, sums[c], window_ns) for c in sorted(sums)}


def split_windows(
    records: Iterable[TelemetryRecord], boundaries: Iterable[int]
) -> Iterator[tuple]:
    """Yield ``(end_ns, window_records)`` for each boundary.

    A record belongs to the first window whose end is >= its timestamp.
    Records beyond the last boundary are dropped.
    """
    it = iter(records)
    pending: Optional[TelemetryRecord] = next(it, None)
    for end in boundaries:
        batch: List[TelemetryRecord] = []
        while pending is not None and pending.ts_ns <= end:
            batch.append(pending)
            pending = next(it, None)
        yield end, batch
        if pending is None:
            return
