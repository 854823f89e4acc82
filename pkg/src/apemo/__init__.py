"""Budget-scheduled multi-turn agent trajectories: policies, simulator,
model-server executor, benchmark blocks, statistics, and frontier analysis."""

from .abm import AbmConfig, TrapSpec, abm_step, make_abm_executor
from .benchmark import (
    BlockConfig,
    ReuseParams,
    RunRecord,
    RunStore,
    RuntimeSettings,
    no_fallback_rate,
    run_block,
    trap_metrics,
)
from .executor import Executor, ExecutorError, TurnContext, TurnOutcome
from .frontier import FrontierPoint, frontier_table, pareto_front, viability
from .llm import (
    DecodingParams,
    LlmExecutor,
    ModelEndpoint,
    RoleSpec,
    chat_complete,
    run_flow_turn,
    score_quality,
)
from .scheduler import (
    BudgetLedger,
    DetectionConfig,
    PolicyKind,
    RepairDecision,
    SchedulerConfig,
    detect_negative_peak,
    plan_turn_budget,
    request_repair,
    run_trajectory,
)
from .signals import ProxyVector, SignalConfig, TextDigest, frustration_score
from .stats import DeltaReport, block_report, bootstrap_ci, pair_runs, sign_test
from .trajectory import (
    CostBreakdown,
    ObjectiveWeights,
    Trajectory,
    TurnRecord,
    average_frustration,
    coordination_cost,
    objective_value,
    peak_end_quality,
    reuse_per_cost,
    reuse_probability,
)

__version__ = "0.1.0"
