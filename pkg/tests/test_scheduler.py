"""Scheduler behavior: allocation arithmetic, detection, repair, loop invariants."""

from __future__ import annotations

import json
import random

import pytest

from apemo.abm import AbmConfig, TrapSpec, make_abm_executor
from apemo.executor import ExecutorError, TurnContext, TurnOutcome
from apemo.scheduler import (
    BudgetLedger,
    DetectionConfig,
    PolicyKind,
    RepairReason,
    SchedulerConfig,
    detect_negative_peak,
    plan_turn_budget,
    request_repair,
    run_trajectory,
)
from apemo.signals import TextDigest


def no_overhead_cfg(**kwargs) -> SchedulerConfig:
    kwargs.setdefault("monitor_overhead", 0)
    return SchedulerConfig(**kwargs)


# ---------------------------------------------------------------- allocation


def test_uniform_even_division():
    cfg = no_overhead_cfg()
    ledger = BudgetLedger(cap=8000)
    for t in range(1, 9):
        assert plan_turn_budget(PolicyKind.UNIFORM, ledger, t, 8, cfg) == 1000
        ledger.charge_policy(1000)


def test_apemo_skims_early_turns_into_reserve():
    cfg = no_overhead_cfg(skim_fraction=0.2)
    ledger = BudgetLedger(cap=8000)
    allocs = []
    for t in range(1, 9):
        alloc = plan_turn_budget(PolicyKind.APEMO, ledger, t, 8, cfg)
        allocs.append(alloc)
        ledger.charge_policy(alloc)
    assert allocs[2] == 800  # skimmed turn: 1000 - 200
    assert allocs[:6] == [800] * 6
    assert allocs[6:] == [1000, 1000]
    assert ledger.reserve_end == 6 * 200


def test_allocation_zero_when_exhausted():
    cfg = no_overhead_cfg()
    ledger = BudgetLedger(cap=100)
    ledger.charge_policy(100)
    assert plan_turn_budget(PolicyKind.UNIFORM, ledger, 1, 4, cfg) == 0


def test_monitor_overhead_prorated_out_of_base():
    cfg = SchedulerConfig(monitor_overhead=15)
    ledger = BudgetLedger(cap=8000)
    # (8000 - 120) // 8 = 985 base for monitoring policies
    assert plan_turn_budget(PolicyKind.TASK_AFFECT, ledger, 7, 8, cfg) == 985


def test_reflect_policy_reserves_extra_phase():
    cfg = no_overhead_cfg()
    ledger = BudgetLedger(cap=600)
    assert plan_turn_budget(PolicyKind.PLAN_EXECUTE_REFLECT, ledger, 1, 2, cfg) == 200


# ----------------------------------------------------------------- detection


def test_detection_stable_trajectory_none():
    cfg = DetectionConfig()
    assert detect_negative_peak([0.8, 0.8, 0.8], [0.1, 0.1, 0.1], cfg) is None


def test_detection_fires_on_drop_into_low_regime():
    cfg = DetectionConfig(quality_floor=0.5, drop_threshold=0.2)
    assert detect_negative_peak([0.8, 0.75, 0.35], [0.1, 0.1, 0.1], cfg) == 3


def test_detection_sustained_low_is_not_a_peak():
    cfg = DetectionConfig(quality_floor=0.5, drop_threshold=0.2)
    assert detect_negative_peak([0.45, 0.44], [0.1, 0.1], cfg) is None


def test_detection_frustration_clause():
    cfg = DetectionConfig(frustration_threshold=0.7)
    assert detect_negative_peak([0.9, 0.9], [0.2, 0.75], cfg) == 2
    assert detect_negative_peak([0.9], [0.75], cfg) == 1


def test_detection_requires_aligned_histories():
    with pytest.raises(ValueError):
        detect_negative_peak([0.5], [], DetectionConfig())


# ------------------------------------------------------------------- repairs


def test_repair_grant_within_reserve():
    ledger = BudgetLedger(cap=2000)
    ledger.charge_policy(1400)
    ledger.add_reserve(600)
    decision = request_repair(ledger, RepairReason.NEGATIVE_PEAK, 500, trigger_turn=3)
    assert decision.granted_tokens == 500
    assert ledger.repair_cost == 500
    assert ledger.reserve_end == 100


def test_repair_grant_zero_when_exhausted():
    ledger = BudgetLedger(cap=1000)
    ledger.charge_policy(1000)
    decision = request_repair(ledger, RepairReason.NEGATIVE_PEAK, 400, trigger_turn=2)
    assert decision.granted_tokens == 0


def test_repair_grant_min_rule_across_reserve_and_unreserved():
    ledger = BudgetLedger(cap=1000)
    ledger.charge_policy(600)
    ledger.add_reserve(300)  # unreserved remaining = 100
    decision = request_repair(ledger, RepairReason.ENDING_STABILIZATION, 500, trigger_turn=8)
    assert decision.granted_tokens == 400
    assert ledger.reserve_end == 0
    assert ledger.repair_cost == 400


def test_repair_rejects_nonpositive_want():
    ledger = BudgetLedger(cap=100)
    with pytest.raises(ValueError):
        request_repair(ledger, RepairReason.NEGATIVE_PEAK, 0, trigger_turn=1)


def test_ledger_never_exceeds_cap():
    ledger = BudgetLedger(cap=100)
    with pytest.raises(Exception):
        ledger.charge_policy(101)


# ------------------------------------------------------------ trajectory loop


def test_single_turn_trajectory():
    cfg = no_overhead_cfg()
    executor = make_abm_executor(AbmConfig(), seed=1)
    traj = run_trajectory(PolicyKind.UNIFORM, executor, 1, 1000, 1, cfg)
    assert traj.horizon == 1
    assert traj.cost.total <= 1000
    assert not any(t.repaired for t in traj.turns)


def test_scripted_trap_repaired_and_endpoint_recovers():
    cfg = SchedulerConfig()
    trap = TrapSpec(4, 0.4)
    executor = make_abm_executor(AbmConfig(), seed=9, trap=trap)
    traj = run_trajectory(PolicyKind.APEMO, executor, 8, 1600, 9, cfg)
    assert traj.turns[3].trapped
    assert traj.turns[3].repaired or traj.turns[4].repaired
    assert traj.qualities()[-1] > traj.qualities()[3] or traj.turns[3].repaired


def test_turn1_digest_identical_across_policies_same_seed():
    # temporal policies must not alter the generator, only allocation
    cfg = SchedulerConfig()
    for seed in range(20):
        a = run_trajectory(PolicyKind.APEMO, make_abm_executor(AbmConfig(), seed), 8, 1600, seed, cfg)
        u = run_trajectory(PolicyKind.UNIFORM, make_abm_executor(AbmConfig(), seed), 8, 1600, seed, cfg)
        assert a.turns[0].output_digest == u.turns[0].output_digest


def test_non_temporal_policies_never_repair():
    cfg = SchedulerConfig()
    trap = TrapSpec(3, 0.5)
    for policy in (PolicyKind.UNIFORM, PolicyKind.FLOW_PLAIN, PolicyKind.PLAN_EXECUTE):
        for seed in range(10):
            executor = make_abm_executor(AbmConfig(), seed, trap=trap)
            traj = run_trajectory(policy, executor, 6, 1200, seed, cfg)
            assert not any(t.repaired for t in traj.turns)
            assert traj.cost.repair_cost == 0


def test_repair_count_bounded():
    cfg = SchedulerConfig(max_repairs=2)
    trap = TrapSpec(3, 0.6)
    for seed in range(30):
        executor = make_abm_executor(AbmConfig(noise_sd=0.15), seed, trap=trap)
        traj = run_trajectory(PolicyKind.APEMO, executor, 8, 1600, seed, cfg)
        assert sum(1 for t in traj.turns if t.repaired) <= 2 + 2


def test_reduction_to_uniform_bit_identical():
    cfg = SchedulerConfig(
        detection=DetectionConfig(quality_floor=0.0, drop_threshold=0.2,
                                  frustration_threshold=1.5),
        skim_fraction=0.0,
        monitor_overhead=0,
    )
    for seed in range(25):
        a = run_trajectory(PolicyKind.APEMO, make_abm_executor(AbmConfig(), seed), 8, 1600, seed, cfg)
        u = run_trajectory(PolicyKind.UNIFORM, make_abm_executor(AbmConfig(), seed), 8, 1600, seed, cfg)
        da, du = a.to_dict(), u.to_dict()
        da.pop("policy")
        du.pop("policy")
        assert json.dumps(da, sort_keys=True) == json.dumps(du, sort_keys=True)


def test_thresholds_unreachable_gives_uniform_plus_reserve():
    cfg = SchedulerConfig(
        detection=DetectionConfig(quality_floor=0.0, frustration_threshold=1.5),
        monitor_overhead=0,
        ending_threshold=0.0,  # endings never re-executed either
    )
    seed = 3
    traj = run_trajectory(PolicyKind.APEMO, make_abm_executor(AbmConfig(), seed), 8, 8000, seed, cfg)
    assert [t.tokens_spent for t in traj.turns] == [800] * 6 + [1000, 1000]
    assert traj.cost.repair_cost == 0


def test_determinism_same_inputs_same_serialization():
    cfg = SchedulerConfig()
    trap = TrapSpec(4, 0.4)
    runs = []
    for _ in range(2):
        executor = make_abm_executor(AbmConfig(), 17, trap=trap)
        runs.append(run_trajectory(PolicyKind.APEMO, executor, 8, 1600, 17, cfg).to_json())
    assert runs[0] == runs[1]


def test_budget_cap_precondition():
    cfg = SchedulerConfig()
    with pytest.raises(ValueError):
        run_trajectory(PolicyKind.UNIFORM, make_abm_executor(AbmConfig(), 1), 8, 7, 1, cfg)


def test_policy_serialized_names_exact():
    assert {p.value for p in PolicyKind} == {
        "uniform", "task_affect", "task_peak_end", "apemo",
        "plan_execute", "plan_execute_reflect", "flow_plain", "flow_temporal",
    }
    assert str(PolicyKind.APEMO) == "apemo"


def test_reflection_pass_charges_policy_cost_not_repair():
    cfg = no_overhead_cfg()
    for seed in range(10):
        base = run_trajectory(
            PolicyKind.PLAN_EXECUTE, make_abm_executor(AbmConfig(), seed), 4, 1000, seed, cfg
        )
        reflected = run_trajectory(
            PolicyKind.PLAN_EXECUTE_REFLECT, make_abm_executor(AbmConfig(), seed), 4, 1000, seed, cfg
        )
        assert reflected.cost.repair_cost == 0
        assert not any(t.repaired for t in reflected.turns)
        # the final turn absorbs the reflection pass: one extra execution's tokens
        assert reflected.turns[-1].tokens_spent > reflected.turns[-2].tokens_spent
        assert reflected.cost.total <= 1000
        assert base.cost.repair_cost == 0


class FailingExecutor:
    """Fails a chosen turn; otherwise constant mid quality."""

    def __init__(self, fail_turn):
        self.fail_turn = fail_turn

    def execute_turn(self, ctx: TurnContext, allocated_tokens: int, seed: int) -> TurnOutcome:
        if ctx.turn == self.fail_turn and ctx.attempt == 0:
            raise ExecutorError("injected failure")
        return TurnOutcome(
            digest=TextDigest.from_text(f"answer {ctx.turn} attempt {ctx.attempt}"),
            tokens_used=allocated_tokens,
            quality=0.6,
            text=f"answer {ctx.turn}",
        )


def test_executor_failure_marks_fallback_with_zero_quality_turn():
    cfg = no_overhead_cfg()
    traj = run_trajectory(PolicyKind.UNIFORM, FailingExecutor(3), 4, 800, 1, cfg)
    assert traj.fallback
    assert traj.turns[2].quality == 0.0
    assert traj.turns[2].tokens_spent == 0
    assert traj.cost.total <= 800


def test_budget_safety_fuzz():
    # randomized policies, horizons, caps, thresholds: the cap always holds
    rng = random.Random(20240809)
    policies = list(PolicyKind)
    for trial in range(400):
        policy = policies[rng.randrange(len(policies))]
        horizon = rng.randint(1, 10)
        cap = rng.randint(horizon, 5000)
        cfg = SchedulerConfig(
            detection=DetectionConfig(
                quality_floor=rng.uniform(0.0, 0.9),
                drop_threshold=rng.uniform(0.01, 0.5),
                frustration_threshold=rng.uniform(0.2, 1.2),
            ),
            skim_fraction=rng.uniform(0.0, 0.5),
            monitor_overhead=rng.randint(0, 40),
            max_repairs=rng.randint(0, 3),
            repair_factor=rng.uniform(0.5, 2.5),
            ending_threshold=rng.uniform(0.0, 1.0),
        )
        trap = None
        if horizon >= 2 and rng.random() < 0.5:
            trap = TrapSpec(rng.randint(1, horizon), rng.uniform(0.1, 1.0),
                            rng.uniform(0.0, 1.0))
        abm = AbmConfig(
            initial_quality=rng.uniform(0.1, 0.9),
            drift_rate=rng.uniform(-0.08, 0.04),
            noise_sd=rng.uniform(0.0, 0.25),
        )
        executor = make_abm_executor(abm, trial, trap=trap)
        traj = run_trajectory(policy, executor, horizon, cap, trial, cfg)
        assert traj.cost.total <= cap
        spent = sum(t.tokens_spent for t in traj.turns)
        assert spent == traj.cost.policy_cost + traj.cost.repair_cost
