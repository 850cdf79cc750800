"""Energy-aware CPU orchestration for a softwarised RAN distributed unit."""

from .controller import (
    ALL_POLICIES,
    Controller,
    ControllerConfig,
    PolicyKind,
    affinity_cluster,
    decide,
    enforce_or_rollback,
    governor_step,
)
from .model import (
    ConstraintConfig,
    ConstraintReport,
    FrequencyLevels,
    PowerModelParams,
    SchedulingPlan,
    check_constraints,
    core_power,
    dwell_feasible,
    fit_power_model,
    plan_energy,
)
from .oracle import OracleInstance, brute_force_optimal, heuristic_plan
from .scenario import ScenarioConfig, ThreadProfile, inject_background, load_scenario
from .simulator import RunReport, Simulator, run_scenario
from .telemetry import (
    CoreStats,
    TelemetryRecord,
    ThreadStats,
    aggregate_window,
    parse_record,
    per_core_rollup,
)

__version__ = "0.1.0"
