"""Runtime budget scheduling: policies, ledger, peak detection, repair.

Policies share one trajectory loop and differ only in allocation shape and
repair behavior. Temporal policies skim a fraction of early-turn budget
into an ending reserve, watch the quality/frustration series for negative
peaks, re-execute flagged turns once with banked tokens (keeping the
better result), and stabilize the final two turns. The ledger enforces the
hard budget cap at every mutation; a trajectory can be starved but never
overdrawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from .executor import Executor, ExecutorError, TurnContext, TurnOutcome, fallback_outcome
from .signals import SignalConfig, TextDigest, compute_proxies, frustration_score
from .trajectory import CostBreakdown, Trajectory, TurnRecord


class BudgetError(RuntimeError):
    """Internal guard: a ledger mutation would have exceeded the cap."""


class PolicyKind(str, Enum):
    UNIFORM = "uniform"
    TASK_AFFECT = "task_affect"
    TASK_PEAK_END = "task_peak_end"
    APEMO = "apemo"
    PLAN_EXECUTE = "plan_execute"
    PLAN_EXECUTE_REFLECT = "plan_execute_reflect"
    FLOW_PLAIN = "flow_plain"
    FLOW_TEMPORAL = "flow_temporal"

    def __str__(self) -> str:  # serialized name, not the enum repr
        return self.value


@dataclass(frozen=True)
class PolicyTraits:
    """What a policy does at runtime, beyond plain per-turn execution."""

    topology: str = "single"  # single | plan_execute | flow
    skims: bool = False
    monitors: bool = False
    detect_quality: bool = False
    detect_frustration: bool = False
    stabilize_endings: bool = False
    reflect: bool = False


POLICY_TRAITS: dict[PolicyKind, PolicyTraits] = {
    PolicyKind.UNIFORM: PolicyTraits(),
    PolicyKind.TASK_AFFECT: PolicyTraits(monitors=True, detect_frustration=True),
    PolicyKind.TASK_PEAK_END: PolicyTraits(skims=True, monitors=True, stabilize_endings=True),
    PolicyKind.APEMO: PolicyTraits(
        skims=True, monitors=True, detect_quality=True,
        detect_frustration=True, stabilize_endings=True,
    ),
    PolicyKind.PLAN_EXECUTE: PolicyTraits(topology="plan_execute"),
    PolicyKind.PLAN_EXECUTE_REFLECT: PolicyTraits(topology="plan_execute", reflect=True),
    PolicyKind.FLOW_PLAIN: PolicyTraits(topology="flow"),
    PolicyKind.FLOW_TEMPORAL: PolicyTraits(
        topology="flow", skims=True, monitors=True, detect_quality=True,
        detect_frustration=True, stabilize_endings=True,
    ),
}

TEMPORAL_POLICIES = frozenset(p for p, t in POLICY_TRAITS.items() if t.monitors)


class RepairReason(str, Enum):
    NEGATIVE_PEAK = "negative_peak"
    ENDING_STABILIZATION = "ending_stabilization"


@dataclass(frozen=True)
class RepairDecision:
    trigger_turn: int
    reason: RepairReason
    granted_tokens: int


@dataclass(frozen=True)
class DetectionConfig:
    """Thresholds for the negative-peak trigger.

    The quality clause fires when the current quality is below quality_floor
    AND the one-turn drop is at least drop_threshold; the frustration clause
    fires when the score reaches frustration_threshold. Either clause
    triggers. Setting quality_floor to 0 or frustration_threshold above 1
    makes the respective clause unreachable.
    """

    quality_floor: float = 0.5
    drop_threshold: float = 0.2
    frustration_threshold: float = 0.7


@dataclass(frozen=True)
class SchedulerConfig:
    """All knobs of the trajectory loop, shared across policies."""

    task: str = "plan the route and estimate total cost and risks"
    signal: SignalConfig = field(default_factory=SignalConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    skim_fraction: float = 0.2
    monitor_overhead: int = 15
    max_repairs: int = 2
    repair_factor: float = 1.5
    ending_threshold: float = 0.75

    def __post_init__(self) -> None:
        if not 0.0 <= self.skim_fraction < 1.0:
            raise ValueError(f"skim_fraction must be in [0, 1), got {self.skim_fraction}")
        if self.monitor_overhead < 0:
            raise ValueError(f"monitor_overhead must be >= 0, got {self.monitor_overhead}")
        if self.max_repairs < 0:
            raise ValueError(f"max_repairs must be >= 0, got {self.max_repairs}")
        if self.repair_factor <= 0:
            raise ValueError(f"repair_factor must be > 0, got {self.repair_factor}")


@dataclass
class BudgetLedger:
    """Running coordination-cost decomposition against a hard cap.

    Total spent never exceeds the cap at any observable point; every
    mutation revalidates the invariant.
    """

    cap: int
    policy_cost: int = 0
    repair_cost: int = 0
    overhead_cost: int = 0
    reserve_end: int = 0

    def __post_init__(self) -> None:
        if self.cap < 0:
            raise ValueError(f"cap must be >= 0, got {self.cap}")

    @property
    def total_spent(self) -> int:
        return self.policy_cost + self.repair_cost + self.overhead_cost

    def unreserved_remaining(self) -> int:
        return self.cap - self.total_spent - self.reserve_end

    def _check(self) -> None:
        if self.total_spent > self.cap:
            raise BudgetError(f"spent {self.total_spent} exceeds cap {self.cap}")
        if self.reserve_end < 0 or self.reserve_end > self.cap - self.total_spent:
            raise BudgetError(
                f"reserve {self.reserve_end} invalid against cap {self.cap}, "
                f"spent {self.total_spent}"
            )

    def charge_policy(self, tokens: int) -> None:
        if tokens < 0:
            raise ValueError("cannot charge negative tokens")
        self.policy_cost += tokens
        self._check()

    def charge_overhead(self, tokens: int) -> None:
        if tokens < 0:
            raise ValueError("cannot charge negative tokens")
        self.overhead_cost += tokens
        self._check()

    def add_reserve(self, tokens: int) -> None:
        if tokens < 0:
            raise ValueError("cannot reserve negative tokens")
        self.reserve_end += tokens
        self._check()

    def grant_repair(self, want_tokens: int) -> int:
        """Grant min(want, reserve + unreserved remaining), drawing reserve first."""
        if want_tokens <= 0:
            raise ValueError(f"want_tokens must be > 0, got {want_tokens}")
        available = self.reserve_end + self.unreserved_remaining()
        granted = min(want_tokens, available)
        if granted <= 0:
            return 0
        from_reserve = min(granted, self.reserve_end)
        self.reserve_end -= from_reserve
        self.repair_cost += granted
        self._check()
        return granted

    def refund_repair(self, tokens: int) -> None:
        """Return the unused part of a repair grant."""
        if tokens < 0 or tokens > self.repair_cost:
            raise ValueError(f"invalid repair refund {tokens}")
        self.repair_cost -= tokens
        self._check()

    def breakdown(self) -> CostBreakdown:
        return CostBreakdown(
            policy_cost=self.policy_cost,
            repair_cost=self.repair_cost,
            overhead_cost=self.overhead_cost,
        )


def turn_base_budget(policy: PolicyKind, cap: int, horizon: int, cfg: SchedulerConfig) -> int:
    """Even per-turn base after setting aside monitoring overhead and, for
    the reflect policy, one extra phase for the reflection pass."""
    traits = POLICY_TRAITS[policy]
    phases = horizon + 1 if traits.reflect else horizon
    overhead_total = cfg.monitor_overhead * horizon if traits.monitors else 0
    return max((cap - overhead_total) // phases, 0)


def plan_turn_budget(
    policy: PolicyKind,
    ledger: BudgetLedger,
    turn: int,
    horizon: int,
    cfg: SchedulerConfig,
) -> int:
    """Token allocation for one turn; skimming policies bank the skimmed part.

    Never exceeds the unreserved remaining budget; an exhausted ledger gets 0
    and the turn runs at minimum precision.
    """
    if not 1 <= turn <= horizon:
        raise ValueError(f"turn {turn} outside horizon 1..{horizon}")
    traits = POLICY_TRAITS[policy]
    base = turn_base_budget(policy, ledger.cap, horizon, cfg)
    alloc = base
    skim_amount = 0
    if traits.skims and horizon >= 3 and turn <= horizon - 2:
        skim_amount = int(base * cfg.skim_fraction)
        alloc = base - skim_amount
    alloc = min(alloc, ledger.unreserved_remaining())
    alloc = max(alloc, 0)
    if skim_amount > 0:
        bankable = min(skim_amount, ledger.unreserved_remaining() - alloc)
        if bankable > 0:
            ledger.add_reserve(bankable)
    return alloc


def detect_negative_peak(
    q_history: Sequence[float],
    s_history: Sequence[float],
    cfg: DetectionConfig,
) -> Optional[int]:
    """Return the current (1-based) index when the trigger fires, else None.

    Quality clause: q_t below the floor AND a one-turn drop of at least
    drop_threshold (needs t >= 2). Frustration clause: S_f(t) at or above
    the threshold. Sustained-low quality without a drop is not a peak.
    """
    if not q_history or len(q_history) != len(s_history):
        raise ValueError("quality and frustration histories must be aligned and non-empty")
    t = len(q_history)
    q_now = q_history[-1]
    if t >= 2:
        drop = q_history[-2] - q_now
        if q_now < cfg.quality_floor and drop >= cfg.drop_threshold:
            return t
    if s_history[-1] >= cfg.frustration_threshold:
        return t
    return None


def request_repair(
    ledger: BudgetLedger, reason: RepairReason, want_tokens: int, trigger_turn: int
) -> RepairDecision:
    """Ask the ledger to fund a repair; a zero grant means the repair is skipped."""
    if want_tokens <= 0:
        raise ValueError(f"want_tokens must be > 0, got {want_tokens}")
    granted = ledger.grant_repair(want_tokens)
    return RepairDecision(trigger_turn=trigger_turn, reason=reason, granted_tokens=granted)


def effective_detection(traits: PolicyTraits, cfg: DetectionConfig) -> DetectionConfig:
    """Disable clauses a policy does not use by making them unreachable."""
    quality_floor = cfg.quality_floor if traits.detect_quality else 0.0
    frustration = cfg.frustration_threshold if traits.detect_frustration else 2.0
    return DetectionConfig(
        quality_floor=quality_floor,
        drop_threshold=cfg.drop_threshold,
        frustration_threshold=frustration,
    )


def role_for_turn(traits: PolicyTraits, turn: int) -> str:
    if traits.topology == "plan_execute":
        return "planner" if turn == 1 else "executor"
    if traits.topology == "flow":
        return "flow"
    return "single"


def _critique_note(reason: RepairReason, quality: float) -> str:
    if reason is RepairReason.NEGATIVE_PEAK:
        return (
            f"The previous attempt scored {quality:.2f} and drifted off course. "
            "Re-answer the task directly, avoid repeating yourself, and finish cleanly."
        )
    return (
        f"The closing answer scored {quality:.2f}. Produce a stronger final answer: "
        "complete, on-task, and clearly concluded."
    )


@dataclass
class _TurnState:
    """Mutable bookkeeping for the turn currently being executed."""

    outcome: TurnOutcome
    tokens_spent: int
    repaired: bool
    trapped: bool


def run_trajectory(
    policy: PolicyKind,
    executor: Executor,
    horizon: int,
    budget_cap: int,
    seed: int,
    cfg: SchedulerConfig,
    model_id: str = "abm",
    episode_id: int = 0,
) -> Trajectory:
    """Execute one full trajectory under a policy, returning the sealed record.

    Per turn: allocate, execute, score affect signals, optionally detect a
    negative peak and re-execute once with banked tokens, and on the final
    two turns spend any remaining reserve on ending re-executions. Executor
    failures record a zero-quality turn and mark the trajectory as fallback.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if budget_cap < horizon:
        raise ValueError(f"budget cap {budget_cap} below one token per turn for T={horizon}")

    traits = POLICY_TRAITS[policy]
    detection = effective_detection(traits, cfg.detection)
    ledger = BudgetLedger(cap=budget_cap)
    task_digest = TextDigest.from_text(cfg.task, cfg.signal.ngram_order)

    turns: list[TurnRecord] = []
    kept_texts: list[str] = []
    digest_history: list[TextDigest] = []
    length_history: list[int] = []
    q_history: list[float] = []
    s_history: list[float] = []
    prev_score: Optional[float] = None
    repairs_used = 0
    fallback = False

    def attempt_turn(ctx: TurnContext, alloc: int) -> tuple[TurnOutcome, bool]:
        nonlocal fallback
        try:
            return executor.execute_turn(ctx, alloc, seed), True
        except ExecutorError:
            fallback = True
            return fallback_outcome(cfg.signal.ngram_order), False

    def score_signal(digest: TextDigest) -> float:
        proxies = compute_proxies(digest, digest_history, task_digest, length_history)
        return frustration_score(proxies, cfg.signal, prev_score)

    def try_repair(
        state: _TurnState, ctx: TurnContext, reason: RepairReason, want: int
    ) -> bool:
        """Fund and run one re-execution, keeping the strictly better result.

        Returns whether a re-execution attempt was made (a grant was issued).
        """
        decision = request_repair(ledger, reason, want, ctx.turn)
        if decision.granted_tokens <= 0:
            return False
        retry_ctx = replace(
            ctx,
            attempt=ctx.attempt + 1,
            phase="repair" if reason is RepairReason.NEGATIVE_PEAK else "ending",
            critique=_critique_note(reason, state.outcome.quality),
        )
        retry, ok = attempt_turn(retry_ctx, decision.granted_tokens)
        ledger.refund_repair(decision.granted_tokens - retry.tokens_used)
        if not ok:
            return True
        state.tokens_spent += retry.tokens_used
        state.repaired = True
        if retry.quality > state.outcome.quality:
            state.outcome = retry
        return True

    for turn in range(1, horizon + 1):
        if traits.monitors and cfg.monitor_overhead > 0:
            ledger.charge_overhead(min(cfg.monitor_overhead, ledger.unreserved_remaining()))
        alloc = plan_turn_budget(policy, ledger, turn, horizon, cfg)
        ctx = TurnContext(
            task=cfg.task,
            turn=turn,
            horizon=horizon,
            attempt=0,
            phase="normal",
            prior_quality=q_history[-1] if q_history else None,
            history=tuple(kept_texts),
        )
        outcome, ok = attempt_turn(ctx, alloc)
        ledger.charge_policy(outcome.tokens_used)
        state = _TurnState(
            outcome=outcome,
            tokens_spent=outcome.tokens_used,
            repaired=False,
            trapped=outcome.trapped,
        )

        if ok and (traits.detect_quality or traits.detect_frustration):
            score_now = score_signal(state.outcome.digest)
            trigger = detect_negative_peak(
                q_history + [state.outcome.quality], s_history + [score_now], detection
            )
            if trigger is not None and repairs_used < cfg.max_repairs:
                base = turn_base_budget(policy, budget_cap, horizon, cfg)
                want = max(1, math.ceil(cfg.repair_factor * max(alloc, base)))
                if try_repair(state, ctx, RepairReason.NEGATIVE_PEAK, want):
                    repairs_used += 1
                    ctx = replace(ctx, attempt=ctx.attempt + 1)

        if ok and traits.stabilize_endings and horizon >= 2 and turn >= horizon - 1:
            if state.outcome.quality < cfg.ending_threshold:
                passes_left = horizon - turn + 1
                want = ledger.reserve_end // passes_left
                if want > 0:
                    try_repair(state, ctx, RepairReason.ENDING_STABILIZATION, want)

        score = score_signal(state.outcome.digest)
        q_history.append(state.outcome.quality)
        s_history.append(score)
        prev_score = score
        kept_texts.append(state.outcome.text)
        digest_history.append(state.outcome.digest)
        length_history.append(state.outcome.digest.token_count)
        turns.append(
            TurnRecord(
                index=turn,
                quality=state.outcome.quality,
                frustration=score,
                tokens_spent=state.tokens_spent,
                repaired=state.repaired,
                trapped=state.trapped,
                output_digest=state.outcome.digest,
            )
        )

    if traits.reflect and turns:
        _reflection_pass(
            policy, executor, turns, kept_texts, q_history, ledger, cfg, horizon, seed
        )

    return Trajectory(
        turns=tuple(turns),
        policy=policy.value,
        model_id=model_id,
        seed=seed,
        episode_id=episode_id,
        budget_cap=budget_cap,
        cost=ledger.breakdown(),
        fallback=fallback,
    )


def _reflection_pass(
    policy: PolicyKind,
    executor: Executor,
    turns: list[TurnRecord],
    kept_texts: list[str],
    q_history: list[float],
    ledger: BudgetLedger,
    cfg: SchedulerConfig,
    horizon: int,
    seed: int,
) -> None:
    """One reflection re-execution of the final turn, charged to policy cost."""
    base = turn_base_budget(policy, ledger.cap, horizon, cfg)
    alloc = min(base, ledger.unreserved_remaining())
    if alloc <= 0:
        return
    last = turns[-1]
    ctx = TurnContext(
        task=cfg.task,
        turn=horizon,
        horizon=horizon,
        attempt=1,
        phase="reflect",
        prior_quality=q_history[-2] if len(q_history) >= 2 else None,
        critique=_critique_note(RepairReason.ENDING_STABILIZATION, last.quality),
        history=tuple(kept_texts[:-1]),
    )
    try:
        retry = executor.execute_turn(ctx, alloc, seed)
    except ExecutorError:
        return
    ledger.charge_policy(retry.tokens_used)
    updated = replace(last, tokens_spent=last.tokens_spent + retry.tokens_used)
    if retry.quality > last.quality:
        updated = replace(
            updated, quality=retry.quality, output_digest=retry.digest
        )
        kept_texts[-1] = retry.text
        q_history[-1] = retry.quality
    turns[-1] = updated
