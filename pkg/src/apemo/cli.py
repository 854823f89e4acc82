"""Command-line interface: simulate, run-llm, report, frontier, validate-config.

Exit codes: 0 success, 2 configuration error, 3 transport/preflight error,
4 empty input. All artifacts carry the schema version; report outputs are
deterministic given (config, seeds, stats seed), so reruns are
byte-identical and safe to diff.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .benchmark import RunRecord, RunStore, SCHEMA_VERSION, no_fallback_rate, run_block
from .config import AppConfig, ConfigError, load_config
from .frontier import format_frontier_table, frontier_csv, frontier_table, viability
from .llm import TransportError
from .stats import block_report, format_block_table
from .tasks import TASKS_VERSION

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_EMPTY = 4

REPORT_METRICS = (
    "mean_quality",
    "peak_end_quality",
    "endpoint_quality",
    "reuse_probability",
    "reuse_per_cost",
    "avg_frustration",
    "total_cost",
)
TRAP_METRICS = ("trap_quality_drop", "trap_quality_rebound2", "trap_frustration_drop2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apemo",
        description="Budget-scheduled multi-turn trajectory experiments and reports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML config file (defaults are built in)")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    p_sim = sub.add_parser("simulate", help="run a simulator block")
    common(p_sim)
    p_sim.add_argument("--block", required=True, help="block name from the config")
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                       help="skip cells already persisted (default: on)")

    p_llm = sub.add_parser("run-llm", help="run a model-server block")
    common(p_llm)
    p_llm.add_argument("--block", required=True)
    p_llm.add_argument("--workers", type=int, default=None)
    p_llm.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)

    p_rep = sub.add_parser("report", help="delta tables, frontier, and plot CSVs from records")
    common(p_rep)
    p_rep.add_argument("--records", default=None, help="records directory (default: output dir)")
    p_rep.add_argument("--baselines", nargs="*", default=None,
                       help="baseline policies (default: every non-target policy present)")
    p_rep.add_argument("--target", default="apemo")
    p_rep.add_argument("--stats-seed", type=int, default=None)

    p_fr = sub.add_parser("frontier", help="frontier table only")
    common(p_fr)
    p_fr.add_argument("--records", default=None)
    p_fr.add_argument("--target", default="apemo")

    p_val = sub.add_parser("validate-config", help="parse and validate a config file")
    p_val.add_argument("--config", default=None)
    return parser


def _load(args: argparse.Namespace) -> AppConfig:
    return load_config(args.config)


def _write_manifest(cfg: AppConfig, out_dir: Path, workers: int) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_path": cfg.source_path or "<defaults>",
        "config_hash": cfg.config_hash(),
        "output_dir": str(out_dir),
        "stats_seed": cfg.stats_seed,
        "worker_limit": workers,
        "tasks_version": TASKS_VERSION,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _run_block_command(args: argparse.Namespace, executor_kind: str) -> int:
    cfg = _load(args)
    block = cfg.blocks.get(args.block)
    if block is None:
        available = ", ".join(sorted(cfg.blocks))
        print(f"error: unknown block {args.block!r}; available: {available}", file=sys.stderr)
        return EXIT_CONFIG
    if block.executor != executor_kind:
        print(
            f"error: block {args.block!r} uses executor {block.executor!r}; "
            f"this command runs {executor_kind!r} blocks",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    out_dir = Path(args.out or cfg.output_dir)
    workers = args.workers if args.workers is not None else cfg.workers
    runs_path = out_dir / f"{block.name}.runs.jsonl"
    if not args.resume and runs_path.exists():
        runs_path.unlink()
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out_dir, workers)
    store = RunStore(runs_path)

    def on_record(record: RunRecord, resumed: bool) -> None:
        tag = " (resumed)" if resumed else ""
        print(
            f"run model={record.model_id} seed={record.seed} policy={record.policy} "
            f"T={record.horizon} mean_quality={record.mean_quality:.4f} "
            f"cost={record.total_cost:.0f}{tag}"
        )

    records = run_block(block, cfg.settings, store=store, workers=workers, on_record=on_record)
    rate = no_fallback_rate(records)
    print(
        f"block {block.name}: {len(records)} runs "
        f"({block.runs_per_policy} per policy), no_fallback_rate={rate:.4f}"
    )
    print(f"records: {runs_path}")
    return EXIT_OK


def _load_records(records_dir: Path) -> dict[str, list[RunRecord]]:
    blocks: dict[str, list[RunRecord]] = {}
    for path in sorted(records_dir.glob("*.runs.jsonl")):
        records = RunStore(path).records()
        if records:
            blocks[records[0].block] = records
    return blocks


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _load(args)
    records_dir = Path(args.records or args.out or cfg.output_dir)
    blocks = _load_records(records_dir)
    if not blocks:
        print(f"error: no run records found under {records_dir}", file=sys.stderr)
        return EXIT_EMPTY
    stats_seed = args.stats_seed if args.stats_seed is not None else cfg.stats_seed
    report_dir = Path(args.out or records_dir) / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)

    for name in sorted(blocks):
        records = blocks[name]
        policies = sorted({r.policy for r in records})
        if args.target not in policies:
            print(f"block {name}: target {args.target!r} absent; skipping deltas")
            continue
        baselines = args.baselines or [p for p in policies if p != args.target]
        metrics = list(REPORT_METRICS)
        is_trap = any(r.trap_turn is not None for r in records)
        if is_trap:
            metrics.extend(TRAP_METRICS)
        block_cfg = cfg.blocks.get(name)
        report = block_report(
            records,
            baselines=baselines,
            metrics=metrics,
            target=args.target,
            resamples=cfg.resamples,
            stats_seed=stats_seed,
            strict=bool(block_cfg.strict) if block_cfg else False,
        )
        table = format_block_table(report)
        print(table)
        if report.directional_only:
            print(f"block {name}: gate {report.gate:.4f} < 1.0 -- directional evidence\n")
        (report_dir / f"{name}.report.txt").write_text(table, encoding="utf-8")
        with (report_dir / f"{name}.deltas.jsonl").open("w", encoding="utf-8") as fh:
            header = {
                "block": report.block,
                "target": report.target,
                "gate": report.gate,
                "stats_seed": report.stats_seed,
                "directional_only": report.directional_only,
                "strict": report.strict,
                "schema_version": SCHEMA_VERSION,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for row in report.rows:
                fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
        if is_trap:
            _write_trap_series(report_dir / f"{name}.trap_series.csv", records)

    _emit_frontier(blocks, report_dir, args.target)
    print(f"reports: {report_dir}")
    return EXIT_OK


def _write_trap_series(path: Path, records: Sequence[RunRecord]) -> None:
    """Per-turn mean quality/frustration by policy, for trap-dynamics plots."""
    by_policy: dict[str, list[RunRecord]] = {}
    for r in records:
        by_policy.setdefault(r.policy, []).append(r)
    lines = ["policy,turn,mean_quality,mean_frustration"]
    for policy in sorted(by_policy):
        rows = by_policy[policy]
        horizon = rows[0].horizon
        for t in range(horizon):
            q = sum(r.quality_by_turn[t] for r in rows) / len(rows)
            s = sum(r.frustration_by_turn[t] for r in rows) / len(rows)
            lines.append(f"{policy},{t + 1},{q:.6f},{s:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _emit_frontier(
    blocks: dict[str, list[RunRecord]], report_dir: Path, target: str
) -> None:
    points, skipped = frontier_table(blocks, target=target)
    for note in skipped:
        print(f"frontier: skipped {note}")
    if not points:
        return
    print(format_frontier_table(points))
    (report_dir / "frontier.csv").write_text(frontier_csv(points), encoding="utf-8")
    with (report_dir / "frontier.jsonl").open("w", encoding="utf-8") as fh:
        for p in points:
            v = viability(p)
            fh.write(
                json.dumps(
                    {
                        "label": p.label,
                        "gain_pct": p.gain,
                        "cost_pct": p.cost_increase,
                        "viable": v.viable,
                        "ratio": None if v.ratio == float("inf") else v.ratio,
                        "raw": p.raw,
                        "schema_version": SCHEMA_VERSION,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    (report_dir / "frontier.txt").write_text(format_frontier_table(points), encoding="utf-8")


def cmd_frontier(args: argparse.Namespace) -> int:
    cfg = _load(args)
    records_dir = Path(args.records or args.out or cfg.output_dir)
    blocks = _load_records(records_dir)
    if not blocks:
        print(f"error: no run records found under {records_dir}", file=sys.stderr)
        return EXIT_EMPTY
    report_dir = Path(args.out or records_dir) / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    _emit_frontier(blocks, report_dir, args.target)
    return EXIT_OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    print(f"config ok (hash {cfg.config_hash()})")
    for name in sorted(cfg.blocks):
        block = cfg.blocks[name]
        print(
            f"  block {name}: executor={block.executor} T={block.horizon} "
            f"episodes={block.episodes} cap={block.budget_cap} "
            f"policies={[p.value for p in block.policies]} "
            f"runs_per_policy={block.runs_per_policy}"
        )
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _run_block_command(args, "abm")
        if args.command == "run-llm":
            return _run_block_command(args, "llm")
        if args.command == "report":
            return cmd_report(args)
        if args.command == "frontier":
            return cmd_frontier(args)
        if args.command == "validate-config":
            return cmd_validate_config(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
