"""Run-level statistics: paired deltas, bootstrap CIs, exact sign tests.

Everything here consumes run-level records only; episode rows never reach
the statistics, which keeps runs the unit of analysis. Resampling is
seeded and chunked so results replay exactly regardless of machine.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np

from .benchmark import RunRecord, no_fallback_rate

PAIR_METRICS = (
    "mean_quality",
    "peak_end_quality",
    "endpoint_quality",
    "reuse_probability",
    "reuse_per_cost",
    "avg_frustration",
    "total_cost",
    "trap_quality_drop",
    "trap_quality_rebound2",
    "trap_frustration_drop2",
)


@dataclass(frozen=True)
class DeltaReport:
    """One metric's paired delta row: target minus baseline over matched runs."""

    metric: str
    baseline: str
    mean_delta: float
    ci_low: float
    ci_high: float
    sign_p: float
    n: int
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.ci_low > self.ci_high:
            raise ValueError(f"ci_low {self.ci_low} above ci_high {self.ci_high}")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "baseline": self.baseline,
            "mean_delta": self.mean_delta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "sign_p": self.sign_p,
            "n": self.n,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class Pairing:
    """Matched target/baseline run pairs plus anything that failed to match."""

    pairs: tuple[tuple[RunRecord, RunRecord], ...]
    orphans: tuple[RunRecord, ...]

    @property
    def n(self) -> int:
        return len(self.pairs)


def _pair_key(record: RunRecord) -> tuple:
    return (record.model_id, record.seed, record.horizon, record.episodes)


def pair_runs(
    target_records: Sequence[RunRecord], baseline_records: Sequence[RunRecord]
) -> Pairing:
    """Match runs exactly on (model, seed, horizon, episode count).

    Unmatched records on either side are returned as orphans, never dropped
    silently. Zero matches is an error.
    """
    baseline_by_key = {_pair_key(r): r for r in baseline_records}
    pairs = []
    orphans = []
    matched_keys = set()
    for rec in sorted(target_records, key=_pair_key):
        key = _pair_key(rec)
        other = baseline_by_key.get(key)
        if other is None:
            orphans.append(rec)
        else:
            pairs.append((rec, other))
            matched_keys.add(key)
    orphans.extend(
        r for r in sorted(baseline_records, key=_pair_key) if _pair_key(r) not in matched_keys
    )
    if not pairs:
        raise ValueError("no matched run pairs between target and baseline records")
    return Pairing(pairs=tuple(pairs), orphans=tuple(orphans))


def metric_deltas(pairing: Pairing, metric: str) -> list[float]:
    """Per-pair target-minus-baseline values for one metric."""
    if metric not in PAIR_METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {PAIR_METRICS}")
    deltas = []
    for target, baseline in pairing.pairs:
        a = getattr(target, metric)
        b = getattr(baseline, metric)
        if a is None or b is None:
            raise ValueError(f"metric {metric!r} missing on a paired record")
        deltas.append(a - b)
    return deltas


def bootstrap_ci(
    samples: Sequence[float],
    resamples: int = 10_000,
    coverage: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean, deterministic per seed.

    Resample indices are drawn in fixed-size chunks from a single seeded
    generator, so the interval is identical regardless of parallelism.
    """
    if len(samples) == 0:
        raise ValueError("bootstrap_ci needs at least one sample")
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must be in (0, 1), got {coverage}")
    arr = np.asarray(samples, dtype=float)
    n = arr.shape[0]
    if np.all(arr == arr[0]):
        # resampling a constant is the constant; skip the FP summation noise
        return float(arr[0]), float(arr[0])
    rng = np.random.default_rng(seed)
    chunk = max(1, min(resamples, 10_000_000 // max(n, 1)))
    means = np.empty(resamples, dtype=float)
    done = 0
    while done < resamples:
        take = min(chunk, resamples - done)
        idx = rng.integers(0, n, size=(take, n))
        means[done : done + take] = arr[idx].mean(axis=1)
        done += take
    alpha = (1.0 - coverage) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


@dataclass(frozen=True)
class SignTestResult:
    p_value: float
    wins: int
    losses: int
    ties: int
    degenerate: bool = False


def sign_test(deltas: Sequence[float]) -> SignTestResult:
    """Exact two-sided binomial sign test; zero deltas are excluded from n.

    p = min(1, 2 * min(P[X <= wins], P[X >= wins])) for X ~ Binomial(n, 1/2).
    All-tie input is degenerate with p = 1.
    """
    if len(deltas) == 0:
        raise ValueError("sign_test needs at least one delta")
    wins = sum(1 for d in deltas if d > 0)
    losses = sum(1 for d in deltas if d < 0)
    ties = len(deltas) - wins - losses
    n = wins + losses
    if n == 0:
        return SignTestResult(p_value=1.0, wins=0, losses=0, ties=ties, degenerate=True)
    denom = 2**n
    tail_low = sum(comb(n, i) for i in range(0, wins + 1)) / denom
    tail_high = sum(comb(n, i) for i in range(wins, n + 1)) / denom
    p = min(1.0, 2.0 * min(tail_low, tail_high))
    return SignTestResult(p_value=p, wins=wins, losses=losses, ties=ties)


@dataclass(frozen=True)
class BlockReport:
    """All delta rows for one block against one or more baselines."""

    block: str
    target: str
    gate: float  # no-fallback rate over every record in the block
    stats_seed: int
    rows: tuple[DeltaReport, ...]
    orphan_keys: tuple[str, ...] = ()
    strict: bool = False

    @property
    def directional_only(self) -> bool:
        return self.gate < 1.0

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "target": self.target,
            "gate": self.gate,
            "stats_seed": self.stats_seed,
            "directional_only": self.directional_only,
            "strict": self.strict,
            "orphan_keys": list(self.orphan_keys),
            "rows": [r.to_dict() for r in self.rows],
        }


def block_report(
    records: Sequence[RunRecord],
    baselines: Sequence[str],
    metrics: Sequence[str],
    target: str = "apemo",
    resamples: int = 10_000,
    stats_seed: int = 0,
    strict: bool = False,
) -> BlockReport:
    """Per-metric delta rows for every (target, baseline) pair in a block."""
    if not records:
        raise ValueError("block_report needs at least one record")
    gate = no_fallback_rate(records)
    block_name = records[0].block
    target_records = [r for r in records if r.policy == target]
    if not target_records:
        raise ValueError(f"no records for target policy {target!r} in block {block_name!r}")
    rows = []
    orphan_keys: list[str] = []
    for baseline in baselines:
        base_records = [r for r in records if r.policy == baseline]
        if not base_records:
            raise ValueError(f"no records for baseline {baseline!r} in block {block_name!r}")
        pairing = pair_runs(target_records, base_records)
        orphan_keys.extend(
            f"{r.policy}:{r.model_id}/seed={r.seed}/T={r.horizon}" for r in pairing.orphans
        )
        for metric in metrics:
            deltas = metric_deltas(pairing, metric)
            low, high = bootstrap_ci(deltas, resamples=resamples, seed=stats_seed)
            test = sign_test(deltas)
            rows.append(
                DeltaReport(
                    metric=metric,
                    baseline=baseline,
                    mean_delta=float(np.mean(deltas)),
                    ci_low=low,
                    ci_high=high,
                    sign_p=test.p_value,
                    n=pairing.n,
                    degenerate=test.degenerate,
                )
            )
    return BlockReport(
        block=block_name,
        target=target,
        gate=gate,
        stats_seed=stats_seed,
        rows=tuple(rows),
        orphan_keys=tuple(orphan_keys),
        strict=strict and gate == 1.0,
    )


def format_block_table(report: BlockReport) -> str:
    """Aligned text table: one row per (baseline, metric) delta with CI and p."""
    lines = []
    title = f"block {report.block}: {report.target} minus baseline (run-level deltas)"
    lines.append(title)
    lines.append(f"no_fallback_rate = {report.gate:.4f}   stats_seed = {report.stats_seed}")
    if report.directional_only:
        lines.append("NOTE: gate below 1.0 -- directional evidence only")
    if report.strict:
        lines.append("strict block (gate = 1.0)")
    if report.orphan_keys:
        lines.append("unmatched runs: " + ", ".join(report.orphan_keys))
    lines.append("")
    header = f"{'baseline':<22} {'metric':<22} {'delta':>10} {'95% CI':>24} {'sign p':>12} {'n':>4}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in report.rows:
        ci = f"[{row.ci_low:+.4f}, {row.ci_high:+.4f}]"
        p = f"{row.sign_p:.3g}" + ("*" if row.degenerate else "")
        lines.append(
            f"{row.baseline:<22} {row.metric:<22} {row.mean_delta:>+10.4f} {ci:>24} {p:>12} {row.n:>4}"
        )
    lines.append("")
    return "\n".join(lines)
