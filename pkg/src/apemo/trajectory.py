"""Trajectory data model and trajectory-level scoring.

A trajectory is an ordered sequence of agent turns evaluated as a whole.
Retrospective quality weighs the single best turn and the mean of the
final two turns rather than the per-turn average; frustration is carried
as a per-turn series exposed both as a mean (the reported metric) and a
sum (the burden term in the scalar objective).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .signals import TextDigest


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class ObjectiveWeights:
    """Coefficients of the scalar trajectory objective and its quality term.

    quality/reuse enter positively, frustration/cost negatively. peak_weight
    and end_weight split the quality term between the best turn and the
    ending mean and must sum to 1.
    """

    quality_weight: float = 1.0
    reuse_weight: float = 1.0
    frustration_weight: float = 1.0
    cost_weight: float = 1.0
    peak_weight: float = 0.5
    end_weight: float = 0.5

    def __post_init__(self) -> None:
        for name in ("quality_weight", "reuse_weight", "frustration_weight",
                     "cost_weight", "peak_weight", "end_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if abs(self.peak_weight + self.end_weight - 1.0) > 1e-9:
            raise ValueError(
                f"peak_weight + end_weight must be 1, got {self.peak_weight + self.end_weight}"
            )


@dataclass(frozen=True)
class CostBreakdown:
    """Realized coordination cost split into its three channels (token units)."""

    policy_cost: int = 0
    repair_cost: int = 0
    overhead_cost: int = 0

    def __post_init__(self) -> None:
        for name in ("policy_cost", "repair_cost", "overhead_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.policy_cost + self.repair_cost + self.overhead_cost

    def combine(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            policy_cost=self.policy_cost + other.policy_cost,
            repair_cost=self.repair_cost + other.repair_cost,
            overhead_cost=self.overhead_cost + other.overhead_cost,
        )

    def to_dict(self) -> dict:
        return {
            "policy_cost": self.policy_cost,
            "repair_cost": self.repair_cost,
            "overhead_cost": self.overhead_cost,
        }


@dataclass(frozen=True)
class TurnRecord:
    """One executed turn. Repair cost is attributed to the turn it repaired."""

    index: int
    quality: float
    frustration: float
    tokens_spent: int
    repaired: bool = False
    trapped: bool = False
    output_digest: TextDigest = field(default_factory=TextDigest.empty)

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"turn index must be >= 1, got {self.index}")
        _check_unit("quality", self.quality)
        _check_unit("frustration", self.frustration)
        if self.tokens_spent < 0:
            raise ValueError(f"tokens_spent must be >= 0, got {self.tokens_spent}")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "quality": self.quality,
            "frustration": self.frustration,
            "tokens_spent": self.tokens_spent,
            "repaired": self.repaired,
            "trapped": self.trapped,
            "output_digest": self.output_digest.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TurnRecord":
        return cls(
            index=int(d["index"]),
            quality=float(d["quality"]),
            frustration=float(d["frustration"]),
            tokens_spent=int(d["tokens_spent"]),
            repaired=bool(d["repaired"]),
            trapped=bool(d["trapped"]),
            output_digest=TextDigest.from_dict(d["output_digest"]),
        )


@dataclass(frozen=True)
class Trajectory:
    """Ordered turn sequence plus policy/model/seed/budget provenance."""

    turns: tuple[TurnRecord, ...]
    policy: str
    model_id: str
    seed: int
    episode_id: int
    budget_cap: int
    cost: CostBreakdown = field(default_factory=CostBreakdown)
    fallback: bool = False

    def __post_init__(self) -> None:
        if len(self.turns) < 1:
            raise ValueError("trajectory must have at least one turn")
        for pos, turn in enumerate(self.turns, start=1):
            if turn.index != pos:
                raise ValueError(
                    f"turn indices must be exactly 1..T; position {pos} has index {turn.index}"
                )
        if self.budget_cap < 0:
            raise ValueError(f"budget_cap must be >= 0, got {self.budget_cap}")
        if self.cost.total > self.budget_cap:
            raise ValueError(
                f"total cost {self.cost.total} exceeds budget cap {self.budget_cap}"
            )
        spent = sum(t.tokens_spent for t in self.turns)
        if spent != self.cost.policy_cost + self.cost.repair_cost:
            raise ValueError(
                f"turn token totals ({spent}) disagree with ledger "
                f"policy+repair ({self.cost.policy_cost + self.cost.repair_cost})"
            )

    @property
    def horizon(self) -> int:
        return len(self.turns)

    def qualities(self) -> list[float]:
        return [t.quality for t in self.turns]

    def frustrations(self) -> list[float]:
        return [t.frustration for t in self.turns]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "model_id": self.model_id,
            "seed": self.seed,
            "episode_id": self.episode_id,
            "budget_cap": self.budget_cap,
            "fallback": self.fallback,
            "cost": self.cost.to_dict(),
            "turns": [t.to_dict() for t in self.turns],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            turns=tuple(TurnRecord.from_dict(t) for t in d["turns"]),
            policy=d["policy"],
            model_id=d["model_id"],
            seed=int(d["seed"]),
            episode_id=int(d["episode_id"]),
            budget_cap=int(d["budget_cap"]),
            cost=CostBreakdown(**d["cost"]),
            fallback=bool(d["fallback"]),
        )


def peak_end_quality(traj: Trajectory, weights: ObjectiveWeights) -> float:
    """Peak-end weighted trajectory quality.

    peak_weight * max(q_1..q_T) + end_weight * mean(q_{T-1}, q_T). For a
    single-turn trajectory the ending mean collapses to q_1.
    """
    qualities = traj.qualities()
    if not qualities:
        raise ValueError("cannot score an empty trajectory")
    peak = max(qualities)
    if len(qualities) == 1:
        ending = qualities[0]
    else:
        ending = (qualities[-2] + qualities[-1]) / 2.0
    return weights.peak_weight * peak + weights.end_weight * ending


def average_frustration(traj: Trajectory) -> float:
    """Arithmetic mean of the per-turn frustration series."""
    series = traj.frustrations()
    if not series:
        raise ValueError("cannot average an empty trajectory")
    return sum(series) / len(series)


def total_frustration(traj: Trajectory) -> float:
    """Summed frustration burden over the trajectory."""
    series = traj.frustrations()
    if not series:
        raise ValueError("cannot sum an empty trajectory")
    return sum(series)


def coordination_cost(breakdown: CostBreakdown) -> int:
    """Total realized coordination cost across all three channels."""
    return breakdown.total


def reuse_probability(
    q_value: float,
    f_value: float,
    quality_gain: float = 4.0,
    frustration_gain: float = 4.0,
    bias: float = -2.0,
) -> float:
    """Logistic reuse-robustness score: rises with quality, falls with frustration."""
    _check_unit("q_value", q_value)
    _check_unit("f_value", f_value)
    z = quality_gain * q_value - frustration_gain * f_value + bias
    return 1.0 / (1.0 + math.exp(-z))


def objective_value(
    quality: float,
    reuse: float,
    frustration: float,
    cost: float,
    budget_cap: int,
    weights: ObjectiveWeights,
) -> float:
    """Scalar trajectory objective with cost normalized against the budget cap.

    Cost is divided by the cap before weighting so the cost coefficient is
    unit-free against the [0, 1] terms.
    """
    for name, value in (("quality", quality), ("reuse", reuse),
                        ("frustration", frustration), ("cost", cost)):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value}")
    if budget_cap == 0:
        if cost > 0:
            raise ValueError("cost > 0 with a zero budget cap cannot be normalized")
        cost_ratio = 0.0
    else:
        cost_ratio = cost / budget_cap
    return (
        weights.quality_weight * quality
        + weights.reuse_weight * reuse
        - weights.frustration_weight * frustration
        - weights.cost_weight * cost_ratio
    )


def reuse_per_cost(reuse: float, cost_tokens: int) -> float:
    """Reuse score per kilotoken of realized cost."""
    if cost_tokens <= 0:
        raise ValueError(f"reuse_per_cost is undefined for cost {cost_tokens}")
    return reuse / (cost_tokens / 1000.0)
