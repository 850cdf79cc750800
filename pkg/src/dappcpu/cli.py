"""Command-line harness: simulate, sweep-gnb, fit-power, replay, oracle-check.

Exit codes: 0 ok, 2 configuration or usage error, 3 numerical failure,
4 bad input data.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from contextlib import contextmanager
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .controller import ALL_POLICIES, Controller, PolicyKind
from .errors import (
    ConfigError,
    FitError,
    InconsistentCountersError,
    MalformedInputError,
    MalformedLineError,
    OracleSizeError,
    UnmappedThreadError,
)
from .model import fit_power_model
from .scenario import MAX_BACKGROUND_GNBS, ScenarioConfig, inject_background, load_scenario
from .simulator import controller_config_for, run_scenario, window_boundaries
from .telemetry import (
    FIELDS,
    aggregate_window,
    read_records,
    rollup_records,
    split_windows,
    write_records,
)

log = logging.getLogger("dappcpu")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INPUT = 4

SIMULATE_COLUMNS = (
    "scenario",
    "policy",
    "seed",
    "avg_power",
    "throughput",
    "deadline_misses",
    "ctx_switches",
    "mean_ipc",
    "mean_mpki",
    "transitions",
    "savings_vs_baseline",
    "warning",
)
SWEEP_COLUMNS = (
    "gnb",
    "utilization",
    "ctx_rate",
    "ipc",
    "mpki",
    "avg_power",
    "deadline_misses",
)
TRACE_COLUMNS = ("slot", "affinity", "freq", "isolated", "pinned")
FIT_COLUMNS = ("p_static", "k_dyn", "p_idle", "rss", "n_samples")
ORACLE_COLUMNS = (
    "index",
    "n_cores",
    "n_threads",
    "oracle_feasible",
    "heuristic_feasible",
    "oracle_energy",
    "heuristic_energy",
    "ratio",
    "agree",
)


class UsageError(Exception):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".10g")
    return str(value)


def resolve_path(path: str) -> Path:
    """A file path, or the bare name of a file shipped with the package."""
    p = Path(path)
    if p.exists() or p.parent != Path("."):
        return p
    shipped = resources.files("dappcpu") / "data" / p.name
    if shipped.is_file():
        return Path(str(shipped))
    return p


def resolve_config(path: str) -> Path:
    p = resolve_path(path)
    if not p.is_file():
        raise ConfigError(f"no such config file: {path}")
    return p


@contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def emit(
    rows: Sequence[Dict],
    columns: Sequence[str],
    args,
    extra: Optional[Dict] = None,
    trailer: Optional[str] = None,
):
    """Write ``rows`` as CSV (header always) or as a JSON document.

    ``trailer`` is a comment line appended to CSV output; JSON carries the
    same information in ``extra``.
    """
    with _output(args.out) as fh:
        if args.format == "json":
            doc = {
                "columns": list(columns),
                "rows": [{c: _jsonable(r.get(c)) for c in columns} for r in rows],
            }
            if extra:
                doc.update(extra)
            fh.write(json.dumps(doc, indent=2) + "\n")
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
        if trailer:
            fh.write(trailer + "\n")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _load(args) -> ScenarioConfig:
    cfg = load_scenario(resolve_config(args.config))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "slots", None) is not None:
        if args.slots < 1:
            raise UsageError("--slots must be >= 1")
        cfg = cfg.replace(duration_slots=args.slots)
    return cfg


def _policies(name: str) -> List[PolicyKind]:
    if name.strip().lower() == "all":
        return list(ALL_POLICIES)
    try:
        return [PolicyKind.parse(name)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _trace_rows(trace) -> List[Dict]:
    rows = []
    for slot, plan in trace:
        aff, freq, iso, pinned = plan.to_text().split(",")
        rows.append({"slot": slot, "affinity": aff, "freq": freq, "isolated": iso, "pinned": pinned})
    return rows


def _write_trace(path: str, rows: Sequence[Dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([fmt(r[c]) for c in TRACE_COLUMNS])


def cmd_simulate(args) -> int:
    cfg = _load(args)
    kinds = _policies(args.policy)
    if len(kinds) > 1 and (args.trace or args.telemetry):
        raise UsageError("--trace and --telemetry need a single --policy")
    tel_fh = open(args.telemetry, "w") if args.telemetry else None
    try:
        if tel_fh is not None:
            tel_fh.write("# " + " ".join(FIELDS) + "\n")
        on_records = (lambda recs: write_records(recs, tel_fh, header=False)) if tel_fh else None
        reports = [run_scenario(cfg, k, on_records=on_records) for k in kinds]
    finally:
        if tel_fh is not None:
            tel_fh.close()
    base = next((r for r in reports if r.policy == PolicyKind.BASELINE.value), None)
    rows = []
    for r in reports:
        savings = None
        if base is not None and base.avg_power > 0:
            savings = 1.0 - r.avg_power / base.avg_power
        warning = "failsafe" if r.diagnostics.get("failsafe") else ""
        if warning:
            log.warning("%s: controller fail-safe triggered %d times", r.policy, r.diagnostics["failsafe"])
        rows.append(
            {
                "scenario": r.scenario,
                "policy": r.policy,
                "seed": r.seed,
                "avg_power": r.avg_power,
                "throughput": r.throughput,
                "deadline_misses": r.deadline_misses,
                "ctx_switches": r.ctx_switches,
                "mean_ipc": r.mean_ipc,
                "mean_mpki": r.mean_mpki,
                "transitions": r.transitions,
                "savings_vs_baseline": savings,
                "warning": warning,
            }
        )
    if args.trace:
        _write_trace(args.trace, _trace_rows(reports[0].plan_trace))
    emit(rows, SIMULATE_COLUMNS, args)
    return EXIT_OK


def parse_range(text: str) -> List[int]:
    """``"1..5"``, ``"1-5"`` or a single count, all within [0, 5]."""
    t = text.strip()
    try:
        if ".." in t:
            lo, hi = (int(x) for x in t.split("..", 1))
        elif "-" in t[1:]:
            lo, hi = (int(x) for x in t.split("-", 1))
        else:
            lo = hi = int(t)
    except ValueError:
        raise UsageError(f"bad range {text!r}") from None
    if not 0 <= lo <= hi <= MAX_BACKGROUND_GNBS:
        raise UsageError(f"range {text!r} outside [0, {MAX_BACKGROUND_GNBS}]")
    return list(range(lo, hi + 1))


def r_squared(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return float("nan")
    slope, icpt = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + icpt)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("nan")
    return 1.0 - ss_res / ss_tot


def sweep_gnb(cfg: ScenarioConfig, counts: Iterable[int], policy=PolicyKind.BASELINE) -> List[Dict]:
    """Per-core metrics of one run per background gNB count.

    Utilisation and context-switch rate are means over cores and over the
    controller windows after warm-up.
    """
    rows = []
    for g in counts:
        r = run_scenario(cfg.replace(gnb_background=g), policy)
        rows.append(
            {
                "gnb": g,
                "utilization": r.mean_core_metric("utilization", skip=1),
                "ctx_rate": r.mean_core_metric("ctx_rate", skip=1),
                "ipc": r.mean_ipc,
                "mpki": r.mean_mpki,
                "avg_power": r.avg_power,
                "deadline_misses": r.deadline_misses,
            }
        )
    return rows


def cmd_sweep_gnb(args) -> int:
    counts = parse_range(args.range)
    cfg = _load(args)
    kinds = _policies(args.policy)
    if len(kinds) != 1:
        raise UsageError("sweep-gnb takes a single --policy")
    rows = sweep_gnb(cfg, counts, kinds[0])
    r2 = r_squared([r["gnb"] for r in rows], [r["utilization"] for r in rows])
    summary = {"gnb": "r2", "utilization": r2}
    emit(rows + [summary], SWEEP_COLUMNS, args)
    return EXIT_OK


def read_power_samples(path: str) -> List[tuple]:
    """``ghz,watts`` pairs; a header line and ``#`` comments are allowed."""
    try:
        text = resolve_path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    samples = []
    header_ok = True
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if len(row) != 2:
            raise MalformedInputError(f"{path}:{lineno}: expected 'ghz,watts'")
        try:
            f, p = float(row[0]), float(row[1])
        except ValueError:
            if header_ok:
                header_ok = False
                continue
            raise MalformedInputError(f"{path}:{lineno}: non-numeric sample") from None
        if not (math.isfinite(f) and math.isfinite(p)) or f < 0:
            raise MalformedInputError(f"{path}:{lineno}: invalid sample")
        header_ok = False
        samples.append((f, p))
    return samples


def cmd_fit_power(args) -> int:
    samples = read_power_samples(args.samples)
    params, rss = fit_power_model(samples, p_idle=args.p_idle)
    row = {
        "p_static": params.p_static,
        "k_dyn": params.k_dyn,
        "p_idle": params.p_idle,
        "rss": rss,
        "n_samples": len(samples),
    }
    emit([row], FIT_COLUMNS, args)
    return EXIT_OK


def replay_trace(cfg: ScenarioConfig, lines: Iterable[str], policy=PolicyKind.COMBINED):
    """Plans the controller would emit for a recorded counter log.

    Windows follow the scenario's warm-up and cadence; only windows fully
    covered by the log are decided. Constraint reports are not recoverable
    from counters, so every window counts as clean.
    """
    cfg = inject_background(cfg)
    ccfg = controller_config_for(cfg)
    records = list(read_records(lines))
    if not records:
        return []
    last_ts = max(r.ts_ns for r in records)
    records.sort(key=lambda r: (r.ts_ns, r.thread))
    tti_ns = cfg.tti_ns
    ends = [
        b for b in window_boundaries(cfg.duration_slots, ccfg.warmup_slots, ccfg.cadence_slots)
        if b * tti_ns <= last_ts
    ]
    ids = sorted(t.id for t in cfg.threads)
    ctrl = Controller(ccfg, policy, ids, cfg.cores)
    start = 0
    for end_ns, batch in split_windows(records, [b * tti_ns for b in ends]):
        end = end_ns // tti_ns
        window_ns = (end - start) * tti_ns
        stats = aggregate_window(batch, window_ns)
        unknown = set(stats) - set(ids)
        if unknown:
            raise UnmappedThreadError(f"threads {sorted(unknown)} not in the scenario")
        rollup = rollup_records(batch, window_ns, cfg.cores)
        ctrl.on_window(stats, rollup, end)
        start = end
    return list(ctrl.trace)


def cmd_replay(args) -> int:
    cfg = _load(args)
    kinds = _policies(args.policy)
    if len(kinds) != 1:
        raise UsageError("replay takes a single --policy")
    try:
        fh = open(resolve_path(args.telemetry))
    except OSError as exc:
        raise UsageError(f"cannot read {args.telemetry}: {exc}") from None
    with fh:
        trace = replay_trace(cfg, fh, kinds[0])
    emit(_trace_rows(trace), TRACE_COLUMNS, args)
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None


def cmd_oracle_check(args) -> int:
    from . import oracle

    if args.instances < 0:
        raise UsageError("--instances must be >= 0")
    cores = _int_list(args.cores)
    threads = _int_list(args.threads)
    if not cores or not threads:
        raise UsageError("--cores and --threads need at least one value")
    if max(cores) > oracle.MAX_CORES or min(cores) < 1:
        raise OracleSizeError(f"cores must lie in [1, {oracle.MAX_CORES}]")
    if max(threads) > oracle.MAX_THREADS or min(threads) < 1:
        raise OracleSizeError(f"threads must lie in [1, {oracle.MAX_THREADS}]")
    if not 1 <= args.levels <= oracle.MAX_LEVELS:
        raise OracleSizeError(f"levels must lie in [1, {oracle.MAX_LEVELS}]")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    rows = []
    cert = []
    for i in range(args.instances):
        inst = oracle.random_instance(rng, cores, threads, args.levels)
        row = oracle.certify(inst, i)
        cert.append(row)
        rows.append(
            {
                "index": i,
                "n_cores": row.n_cores,
                "n_threads": row.n_threads,
                "oracle_feasible": row.oracle_feasible,
                "heuristic_feasible": row.heuristic_feasible,
                "oracle_energy": row.oracle_energy,
                "heuristic_energy": row.heuristic_energy,
                "ratio": row.ratio,
                "agree": row.agree,
            }
        )
    extra = None
    trailer = None
    if cert:
        s = oracle.summarize(cert, args.bound)
        verdict = "PASS" if s.passed else "FAIL"
        trailer = (
            f"# summary: instances={s.instances} feasible={s.feasible} "
            f"agreement={s.agreement:.4f} within_{args.bound:g}={s.within_bound:.4f} {verdict}"
        )
        print(trailer[2:], file=sys.stderr)
        extra = {"summary": {"instances": s.instances, "feasible": s.feasible,
                             "agreement": s.agreement, "within_bound": s.within_bound,
                             "bound": s.bound, "passed": s.passed}}
    emit(rows, ORACLE_COLUMNS, args, extra, trailer)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="dappcpu", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a scenario under one or all policies")
    s.add_argument("config")
    s.add_argument("--policy", default="all", help="baseline, static, ondemand, combined or all")
    s.add_argument("--slots", type=int, default=None, help="override duration_slots")
    s.add_argument("--trace", help="write the controller's plan trace here")
    s.add_argument("--telemetry", help="write the emitted counter records here")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep-gnb", parents=[common], help="noisy-neighbour sweep")
    s.add_argument("config")
    s.add_argument("--range", default="1..5", help="gNB counts, e.g. 1..5")
    s.add_argument("--policy", default="baseline")
    s.add_argument("--slots", type=int, default=None)
    s.set_defaults(func=cmd_sweep_gnb)

    s = sub.add_parser("fit-power", parents=[common], help="fit P = Ps + k f^2 to samples")
    s.add_argument("samples", help="CSV of ghz,watts")
    s.add_argument("--p-idle", type=float, default=0.0)
    s.set_defaults(func=cmd_fit_power)

    s = sub.add_parser("replay", parents=[common], help="controller decisions over a counter log")
    s.add_argument("telemetry")
    s.add_argument("--config", required=True, help="scenario the log was captured on")
    s.add_argument("--policy", default="combined")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("oracle-check", parents=[common], help="certify the heuristic against the oracle")
    s.add_argument("--instances", type=int, default=200)
    s.add_argument("--cores", default="2,3", help="core counts to draw from")
    s.add_argument("--threads", default="2,3,4", help="thread counts to draw from")
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--bound", type=float, default=1.15)
    s.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, OracleSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MalformedLineError, InconsistentCountersError, UnmappedThreadError, MalformedInputError) as exc:
        msg = str(exc)
        if isinstance(exc, MalformedLineError) and exc.lineno is not None:
            msg = f"line {exc.lineno}: {exc.args[0]} (byte {exc.offset})"
        print(f"input error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
