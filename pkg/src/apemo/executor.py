"""Turn-execution contract shared by the scheduler and its executors.

An executor is a pure function of (context, allocated tokens, seed): the
scheduler owns all cross-turn state and passes the kept history forward
through the context. This keeps replays exact and lets many trajectories
run concurrently without shared mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .signals import TextDigest


class ExecutorError(RuntimeError):
    """A turn could not be executed; the scheduler records a fallback turn."""


@dataclass(frozen=True)
class TurnContext:
    """Everything an executor may condition on for one execution attempt.

    attempt counts prior executions of the same turn (0 = first pass,
    1+ = repair re-executions). prior_quality is the kept quality of the
    previous turn, None on the first turn. history holds the kept output
    text of turns 1..t-1 in order.
    """

    task: str
    turn: int
    horizon: int
    attempt: int = 0
    phase: str = "normal"  # normal | repair | ending | reflect
    prior_quality: float | None = None
    critique: str | None = None
    history: tuple[str, ...] = ()


@dataclass(frozen=True)
class TurnOutcome:
    """Result of one execution attempt."""

    digest: TextDigest
    tokens_used: int
    quality: float
    text: str = ""
    prompt_tokens: int = 0
    trapped: bool = False

    def __post_init__(self) -> None:
        if self.tokens_used < 0:
            raise ValueError(f"tokens_used must be >= 0, got {self.tokens_used}")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality must be in [0, 1], got {self.quality}")


class Executor(Protocol):
    def execute_turn(
        self, ctx: TurnContext, allocated_tokens: int, seed: int
    ) -> TurnOutcome: ...


def fallback_outcome(order: int = 2) -> TurnOutcome:
    """Zero-quality placeholder recorded when an executor fails a turn."""
    return TurnOutcome(
        digest=TextDigest.empty(order), tokens_used=0, quality=0.0, text=""
    )
