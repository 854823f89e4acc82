"""Experimental blocks: cell execution, run-level aggregation, persistence.

A block is a grid of (model, seed, policy) cells sharing a horizon, budget
cap, episode count, executor kind, and optional trap. Each cell runs its
episodes, aggregates episode metrics into one run record, and persists it
as a JSON line keyed by (model, seed, policy, horizon); reruns resume from
the persisted store without re-executing completed cells.
"""

from __future__ import annotations

import json
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

from .abm import AbmConfig, TrapSpec, make_abm_executor
from .executor import Executor
from .llm import DecodingParams, LlmExecutor, ModelEndpoint, ping
from .scheduler import (
    POLICY_TRAITS,
    PolicyKind,
    SchedulerConfig,
    run_trajectory,
)
from .tasks import TASKS
from .trajectory import (
    ObjectiveWeights,
    Trajectory,
    average_frustration,
    peak_end_quality,
    reuse_per_cost,
    reuse_probability,
)

SCHEMA_VERSION = 1

RunKey = tuple[str, int, str, int]  # (model, seed, policy, horizon)


@dataclass(frozen=True)
class ReuseParams:
    """Coefficients of the logistic reuse-robustness map."""

    quality_gain: float = 4.0
    frustration_gain: float = 4.0
    bias: float = -2.0


@dataclass(frozen=True)
class BlockConfig:
    """One experimental block: the cell grid plus shared run parameters."""

    name: str
    executor: str  # abm | llm
    models: tuple[str, ...]
    horizon: int
    episodes: int
    budget_cap: int
    policies: tuple[PolicyKind, ...]
    seeds: tuple[int, ...]
    trap: Optional[TrapSpec] = None
    abm: AbmConfig = field(default_factory=AbmConfig)
    strict: bool = False

    def __post_init__(self) -> None:
        if self.executor not in ("abm", "llm"):
            raise ValueError(f"executor must be 'abm' or 'llm', got {self.executor!r}")
        if not self.models:
            raise ValueError("models must be non-empty")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if self.budget_cap < self.horizon:
            raise ValueError(
                f"budget_cap {self.budget_cap} below one token per turn for T={self.horizon}"
            )
        if not self.policies:
            raise ValueError("policies must be non-empty")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.trap is not None:
            if self.trap.trap_turn < 2 or self.trap.trap_turn + 2 > self.horizon:
                raise ValueError(
                    f"trap turn {self.trap.trap_turn} leaves no 2-turn rebound window "
                    f"inside horizon {self.horizon}"
                )

    @property
    def runs_per_policy(self) -> int:
        return len(self.models) * len(self.seeds)


@dataclass(frozen=True)
class RunRecord:
    """Run-level aggregate of episode metrics for one (model, seed, policy, T) cell."""

    schema_version: int
    block: str
    model_id: str
    seed: int
    policy: str
    horizon: int
    episodes: int
    mean_quality: float
    peak_end_quality: float
    endpoint_quality: float
    reuse_probability: float
    reuse_per_cost: float
    avg_frustration: float
    total_cost: float
    policy_cost: float
    repair_cost: float
    overhead_cost: float
    repair_count: float
    fallback: bool
    quality_by_turn: tuple[float, ...]
    frustration_by_turn: tuple[float, ...]
    trap_turn: Optional[int] = None
    trap_quality_drop: Optional[float] = None
    trap_quality_rebound2: Optional[float] = None
    trap_frustration_drop2: Optional[float] = None

    @property
    def run_key(self) -> RunKey:
        return (self.model_id, self.seed, self.policy, self.horizon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quality_by_turn"] = list(self.quality_by_turn)
        d["frustration_by_turn"] = list(self.frustration_by_turn)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if int(d.get("schema_version", -1)) != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema_version {d.get('schema_version')!r}; "
                f"this reader handles {SCHEMA_VERSION}"
            )
        d = dict(d)
        d["quality_by_turn"] = tuple(d["quality_by_turn"])
        d["frustration_by_turn"] = tuple(d["frustration_by_turn"])
        return cls(**d)


def derive_seed(model_id: str, seed: int, episode: int) -> int:
    """Stable executor seed shared by all policies in a (model, seed, episode) cell."""
    key = f"{model_id}|{seed}|{episode}".encode("utf-8")
    return zlib.crc32(key) & 0x7FFFFFFF


def trap_metrics(traj: Trajectory, trap_turn: int) -> dict[str, float]:
    """Endpoint, drop, and +2-turn rebound metrics around the trap turn."""
    horizon = traj.horizon
    if trap_turn < 2 or trap_turn + 2 > horizon:
        raise ValueError(
            f"trap turn {trap_turn} too close to the horizon ends for T={horizon}"
        )
    q = traj.qualities()
    s = traj.frustrations()
    return {
        "endpoint_quality": q[-1],
        "quality_drop": q[trap_turn - 2] - q[trap_turn - 1],
        "quality_rebound2": q[trap_turn + 1] - q[trap_turn - 1],
        "frustration_drop2": s[trap_turn - 1] - s[trap_turn + 1],
    }


def no_fallback_rate(records: Sequence[RunRecord]) -> float:
    """Fraction of runs that completed without any executor fallback."""
    if not records:
        raise ValueError("no_fallback_rate needs at least one record")
    clean = sum(1 for r in records if not r.fallback)
    return clean / len(records)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def aggregate_run(
    block: BlockConfig,
    model_id: str,
    seed: int,
    policy: PolicyKind,
    trajectories: Sequence[Trajectory],
    weights: ObjectiveWeights,
    reuse: ReuseParams,
) -> RunRecord:
    """Fold episode trajectories into one run-level record (means over episodes)."""
    peq = [peak_end_quality(t, weights) for t in trajectories]
    frs = [average_frustration(t) for t in trajectories]
    reuse_vals = [
        reuse_probability(q, f, reuse.quality_gain, reuse.frustration_gain, reuse.bias)
        for q, f in zip(peq, frs)
    ]
    costs = [t.cost.total for t in trajectories]
    rpc = [reuse_per_cost(r, c) for r, c in zip(reuse_vals, costs)]
    horizon = block.horizon
    q_by_turn = tuple(
        _mean([t.turns[i].quality for t in trajectories]) for i in range(horizon)
    )
    s_by_turn = tuple(
        _mean([t.turns[i].frustration for t in trajectories]) for i in range(horizon)
    )
    trap_fields: dict[str, Optional[float]] = {
        "trap_turn": None,
        "trap_quality_drop": None,
        "trap_quality_rebound2": None,
        "trap_frustration_drop2": None,
    }
    if block.trap is not None:
        metrics = [trap_metrics(t, block.trap.trap_turn) for t in trajectories]
        trap_fields = {
            "trap_turn": block.trap.trap_turn,
            "trap_quality_drop": _mean([m["quality_drop"] for m in metrics]),
            "trap_quality_rebound2": _mean([m["quality_rebound2"] for m in metrics]),
            "trap_frustration_drop2": _mean([m["frustration_drop2"] for m in metrics]),
        }
    return RunRecord(
        schema_version=SCHEMA_VERSION,
        block=block.name,
        model_id=model_id,
        seed=seed,
        policy=policy.value,
        horizon=horizon,
        episodes=len(trajectories),
        mean_quality=_mean([_mean(t.qualities()) for t in trajectories]),
        peak_end_quality=_mean(peq),
        endpoint_quality=_mean([t.qualities()[-1] for t in trajectories]),
        reuse_probability=_mean(reuse_vals),
        reuse_per_cost=_mean(rpc),
        avg_frustration=_mean(frs),
        total_cost=_mean([float(c) for c in costs]),
        policy_cost=_mean([float(t.cost.policy_cost) for t in trajectories]),
        repair_cost=_mean([float(t.cost.repair_cost) for t in trajectories]),
        overhead_cost=_mean([float(t.cost.overhead_cost) for t in trajectories]),
        repair_count=_mean(
            [float(sum(1 for turn in t.turns if turn.repaired)) for t in trajectories]
        ),
        fallback=any(t.fallback for t in trajectories),
        quality_by_turn=q_by_turn,
        frustration_by_turn=s_by_turn,
        **trap_fields,
    )


class RunStore:
    """Append-only JSONL store of run records, resumable by run key."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[RunKey, RunRecord] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = RunRecord.from_dict(json.loads(line))
                    self._records[record.run_key] = record

    def __contains__(self, key: RunKey) -> bool:
        return key in self._records

    def get(self, key: RunKey) -> Optional[RunRecord]:
        return self._records.get(key)

    def append(self, record: RunRecord) -> None:
        with self._lock:
            if record.run_key in self._records:
                raise ValueError(f"duplicate run key {record.run_key}")
            self._records[record.run_key] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def records(self) -> list[RunRecord]:
        return list(self._records.values())


@dataclass(frozen=True)
class RuntimeSettings:
    """Cross-block knobs forwarded into every trajectory run."""

    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    reuse: ReuseParams = field(default_factory=ReuseParams)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    endpoint: Optional[ModelEndpoint] = None
    decoding: DecodingParams = field(default_factory=DecodingParams)
    role_split: tuple[float, float, float] = (0.25, 0.6, 0.15)
    critic_grading: bool = False


def _make_executor(
    block: BlockConfig, settings: RuntimeSettings, model_id: str, exec_seed: int,
    policy: PolicyKind,
) -> Executor:
    order = settings.scheduler.signal.ngram_order
    if block.executor == "abm":
        return make_abm_executor(block.abm, exec_seed, trap=block.trap, ngram_order=order)
    if settings.endpoint is None:
        raise ValueError(f"block {block.name!r} needs an LLM endpoint configuration")
    endpoint = ModelEndpoint(
        base_url=settings.endpoint.base_url,
        model_id=model_id,
        timeout=settings.endpoint.timeout,
        max_retries=settings.endpoint.max_retries,
        backoff_base=settings.endpoint.backoff_base,
    )
    return LlmExecutor(
        endpoint,
        topology=POLICY_TRAITS[policy].topology,
        decoding=settings.decoding,
        role_split=settings.role_split,
        trap=block.trap,
        critic_grading=settings.critic_grading,
        ngram_order=order,
    )


def run_cell(
    block: BlockConfig,
    settings: RuntimeSettings,
    model_id: str,
    seed: int,
    policy: PolicyKind,
) -> RunRecord:
    """Run all episodes of one cell and aggregate them."""
    trajectories = []
    for episode in range(block.episodes):
        task = TASKS[episode % len(TASKS)]
        cfg = SchedulerConfig(
            task=task,
            signal=settings.scheduler.signal,
            detection=settings.scheduler.detection,
            skim_fraction=settings.scheduler.skim_fraction,
            monitor_overhead=settings.scheduler.monitor_overhead,
            max_repairs=settings.scheduler.max_repairs,
            repair_factor=settings.scheduler.repair_factor,
            ending_threshold=settings.scheduler.ending_threshold,
        )
        exec_seed = derive_seed(model_id, seed, episode)
        executor = _make_executor(block, settings, model_id, exec_seed, policy)
        trajectories.append(
            run_trajectory(
                policy,
                executor,
                block.horizon,
                block.budget_cap,
                seed=exec_seed,
                cfg=cfg,
                model_id=model_id,
                episode_id=episode,
            )
        )
    return aggregate_run(block, model_id, seed, policy, trajectories, settings.weights, settings.reuse)


def run_block(
    block: BlockConfig,
    settings: RuntimeSettings,
    store: Optional[RunStore] = None,
    workers: int = 1,
    on_record: Optional[Callable[[RunRecord, bool], None]] = None,
) -> list[RunRecord]:
    """Execute every (model x seed x policy) cell, resuming from the store.

    Completed cells are returned from the store without re-execution; new
    records are persisted as they complete. An unreachable LLM endpoint
    aborts before any cell runs; per-turn executor failures only mark runs.
    """
    if block.executor == "llm":
        if settings.endpoint is None:
            raise ValueError(f"block {block.name!r} needs an LLM endpoint configuration")
        ping(settings.endpoint)

    cells = [
        (model, seed, policy)
        for model in block.models
        for seed in block.seeds
        for policy in block.policies
    ]
    results: dict[RunKey, RunRecord] = {}
    pending = []
    for model, seed, policy in cells:
        key = (model, seed, policy.value, block.horizon)
        if store is not None and key in store:
            record = store.get(key)
            assert record is not None
            results[key] = record
            if on_record:
                on_record(record, True)
        else:
            pending.append((model, seed, policy))

    def execute(cell: tuple[str, int, PolicyKind]) -> RunRecord:
        model, seed, policy = cell
        return run_cell(block, settings, model, seed, policy)

    if workers <= 1:
        finished = map(execute, pending)
        for record in finished:
            if store is not None:
                store.append(record)
            results[record.run_key] = record
            if on_record:
                on_record(record, False)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for record in pool.map(execute, pending):
                if store is not None:
                    store.append(record)
                results[record.run_key] = record
                if on_record:
                    on_record(record, False)

    ordered = [
        results[(model, seed, policy.value, block.horizon)]
        for model, seed, policy in cells
    ]
    return ordered
