"""Configuration: one YAML file defines weights, knobs, endpoints, and blocks.

Defaults are complete, so every command runs without a file; a file only
overrides what it names. Unknown keys are rejected with their path so
typos fail loudly. The server URL may come from the APEMO_SERVER_URL
environment variable, but an explicit endpoint.base_url in the file wins.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .abm import AbmConfig, TrapSpec
from .benchmark import BlockConfig, ReuseParams, RuntimeSettings, SCHEMA_VERSION
from .llm import DecodingParams, ModelEndpoint
from .scheduler import DetectionConfig, PolicyKind, SchedulerConfig
from .signals import SignalConfig
from .trajectory import ObjectiveWeights

ENV_SERVER_URL = "APEMO_SERVER_URL"


class ConfigError(ValueError):
    """A configuration file failed validation; the message names the key path."""


DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "stats_seed": 1234,
    "output_dir": "runs",
    "workers": 1,
    "resamples": 10_000,
    "weights": {
        "quality": 1.0, "reuse": 1.0, "frustration": 1.0, "cost": 1.0,
        "peak": 0.5, "end": 0.5,
    },
    "signal": {"proxy_weights": [0.4, 0.4, 0.2], "ngram_order": 2, "smoothing": 0.3},
    "detection": {
        "quality_floor": 0.5, "drop_threshold": 0.2, "frustration_threshold": 0.7,
    },
    "scheduler": {
        "skim_fraction": 0.2, "monitor_overhead": 15, "max_repairs": 2,
        "repair_factor": 1.5, "ending_threshold": 0.75,
    },
    "reuse": {"quality_gain": 4.0, "frustration_gain": 4.0, "bias": -2.0},
    "abm": {
        "initial_quality": 0.6, "drift_rate": -0.02, "noise_sd": 0.05,
        "uplift_gain": 0.25, "uplift_half": 800.0, "digest_tokens": 32,
    },
    "endpoint": {
        "base_url": "http://127.0.0.1:11434", "model_id": "llama3.2:1b",
        "timeout": 30.0, "max_retries": 2, "backoff_base": 0.25,
    },
    "decoding": {"temperature": 0.2, "top_p": 0.9},
    "role_split": [0.25, 0.6, 0.15],
    "critic_grading": False,
    "blocks": {},
}

# Simulation blocks cover the standard grid shapes (models x seeds gives
# per-policy run counts of 20 / 21 / 20 / 16); LLM blocks need a server.
DEFAULT_BLOCKS: dict[str, dict[str, Any]] = {
    "sim_long": {
        "executor": "abm",
        "models": ["abm-a", "abm-b"],
        "horizon": 8,
        "episodes": 2,
        "budget_cap": 680,
        "policies": ["task_affect", "task_peak_end", "apemo"],
        "seeds": {"count": 10, "start": 1},
        "abm": {"noise_sd": 0.12},
    },
    "sim_short": {
        "executor": "abm",
        "models": ["abm-a", "abm-b", "abm-c"],
        "horizon": 2,
        "episodes": 2,
        "budget_cap": 680,
        "policies": ["task_affect", "task_peak_end", "apemo"],
        "seeds": {"count": 7, "start": 1},
        "abm": {"noise_sd": 0.12},
    },
    "sim_trap": {
        "executor": "abm",
        "models": ["abm-a"],
        "horizon": 8,
        "episodes": 1,
        "budget_cap": 1600,
        "policies": ["task_peak_end", "apemo"],
        "seeds": {"count": 20, "start": 1},
        "trap": {"trap_turn": 4, "severity": 0.4, "recovery_rate": 0.3},
        "strict": True,
    },
    "sim_flow": {
        "executor": "abm",
        "models": ["abm-a", "abm-b"],
        "horizon": 8,
        "episodes": 1,
        "budget_cap": 680,
        "policies": ["flow_plain", "flow_temporal", "apemo"],
        "seeds": {"count": 8, "start": 1},
        "abm": {"noise_sd": 0.12},
    },
    "sim_plan_short": {
        "executor": "abm",
        "models": ["abm-a", "abm-b", "abm-c"],
        "horizon": 2,
        "episodes": 2,
        "budget_cap": 680,
        "policies": ["plan_execute", "plan_execute_reflect", "task_peak_end", "apemo"],
        "seeds": {"count": 10, "start": 1},
        "abm": {"noise_sd": 0.12},
    },
    "sim_plan_long": {
        "executor": "abm",
        "models": ["abm-a", "abm-b", "abm-c"],
        "horizon": 8,
        "episodes": 1,
        "budget_cap": 680,
        "policies": ["plan_execute", "plan_execute_reflect", "task_peak_end", "apemo"],
        "seeds": {"count": 6, "start": 1},
        "abm": {"noise_sd": 0.12},
    },
    "llm_long": {
        "executor": "llm",
        "models": ["qwen2.5:1.5b", "gemma2:2b"],
        "horizon": 8,
        "episodes": 2,
        "budget_cap": 2400,
        "policies": ["task_affect", "task_peak_end", "apemo"],
        "seeds": {"count": 10, "start": 1},
    },
    "llm_flow": {
        "executor": "llm",
        "models": ["qwen2.5:1.5b", "gemma2:2b"],
        "horizon": 8,
        "episodes": 1,
        "budget_cap": 2400,
        "policies": ["flow_plain", "flow_temporal", "apemo"],
        "seeds": {"count": 8, "start": 1},
    },
}


@dataclass(frozen=True)
class AppConfig:
    """Fully resolved configuration: runtime settings plus block definitions."""

    stats_seed: int
    output_dir: str
    workers: int
    resamples: int
    settings: RuntimeSettings
    abm: AbmConfig
    blocks: dict[str, BlockConfig]
    schema_version: int = SCHEMA_VERSION
    source_path: Optional[str] = None
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and key != "blocks":
            if not isinstance(value, Mapping):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _parse_seeds(raw: Any, path: str) -> tuple[int, ...]:
    if isinstance(raw, Mapping):
        unknown = set(raw) - {"count", "start"}
        if unknown:
            raise ConfigError(f"{path}: unknown seed keys {sorted(unknown)}")
        count = int(raw.get("count", 0))
        start = int(raw.get("start", 1))
        if count < 1:
            raise ConfigError(f"{path}: seed count must be >= 1")
        return tuple(range(start, start + count))
    if isinstance(raw, (list, tuple)):
        if not raw:
            raise ConfigError(f"{path}: seeds list must be non-empty")
        return tuple(int(s) for s in raw)
    raise ConfigError(f"{path}: seeds must be a list or {{count, start}}")


def _parse_policy(name: str, path: str) -> PolicyKind:
    try:
        return PolicyKind(name)
    except ValueError as exc:
        valid = ", ".join(p.value for p in PolicyKind)
        raise ConfigError(f"{path}: unknown policy {name!r}; valid: {valid}") from exc


_BLOCK_KEYS = {
    "executor", "models", "horizon", "episodes", "budget_cap", "policies",
    "seeds", "trap", "abm", "strict",
}


def _parse_block(name: str, raw: Mapping, base_abm: AbmConfig) -> BlockConfig:
    path = f"blocks.{name}"
    unknown = set(raw) - _BLOCK_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for required in ("executor", "models", "horizon", "episodes", "budget_cap", "policies", "seeds"):
        if required not in raw:
            raise ConfigError(f"{path}: missing required key {required!r}")
    trap = None
    if raw.get("trap") is not None:
        trap_raw = raw["trap"]
        unknown = set(trap_raw) - {"trap_turn", "severity", "recovery_rate"}
        if unknown:
            raise ConfigError(f"{path}.trap: unknown keys {sorted(unknown)}")
        trap = TrapSpec(
            trap_turn=int(trap_raw["trap_turn"]),
            severity=float(trap_raw["severity"]),
            recovery_rate=float(trap_raw.get("recovery_rate", 0.3)),
        )
    abm_cfg = base_abm
    if raw.get("abm"):
        merged = {**_abm_dict(base_abm), **dict(raw["abm"])}
        unknown = set(merged) - set(_abm_dict(base_abm))
        if unknown:
            raise ConfigError(f"{path}.abm: unknown keys {sorted(unknown)}")
        abm_cfg = _build_abm(merged)
    try:
        return BlockConfig(
            name=name,
            executor=str(raw["executor"]),
            models=tuple(str(m) for m in raw["models"]),
            horizon=int(raw["horizon"]),
            episodes=int(raw["episodes"]),
            budget_cap=int(raw["budget_cap"]),
            policies=tuple(_parse_policy(p, f"{path}.policies") for p in raw["policies"]),
            seeds=_parse_seeds(raw["seeds"], f"{path}.seeds"),
            trap=trap,
            abm=abm_cfg,
            strict=bool(raw.get("strict", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _abm_dict(cfg: AbmConfig) -> dict:
    return {
        "initial_quality": cfg.initial_quality,
        "drift_rate": cfg.drift_rate,
        "noise_sd": cfg.noise_sd,
        "uplift_gain": cfg.uplift_gain,
        "uplift_half": cfg.uplift_half,
        "digest_tokens": cfg.digest_tokens,
    }


def _build_abm(raw: Mapping) -> AbmConfig:
    return AbmConfig(
        initial_quality=float(raw["initial_quality"]),
        drift_rate=float(raw["drift_rate"]),
        noise_sd=float(raw["noise_sd"]),
        uplift_gain=float(raw["uplift_gain"]),
        uplift_half=float(raw["uplift_half"]),
        digest_tokens=int(raw["digest_tokens"]),
    )


def load_config(path: Optional[str] = None, include_default_blocks: bool = True) -> AppConfig:
    """Resolve defaults, optional YAML file, and environment into an AppConfig."""
    merged = dict(DEFAULTS)
    merged["blocks"] = dict(DEFAULT_BLOCKS) if include_default_blocks else {}
    file_sets_url = False
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError("config file must contain a mapping at the top level")
        file_sets_url = isinstance(raw.get("endpoint"), Mapping) and "base_url" in raw["endpoint"]
        file_blocks = raw.get("blocks") or {}
        merged = _merge(merged, {k: v for k, v in raw.items() if k != "blocks"})
        blocks_merged = dict(merged["blocks"])
        if not isinstance(file_blocks, Mapping):
            raise ConfigError("blocks must be a mapping of name -> block definition")
        for name, spec in file_blocks.items():
            blocks_merged[name] = spec
        merged["blocks"] = blocks_merged

    env_url = os.environ.get(ENV_SERVER_URL)
    if env_url and not file_sets_url:
        merged = dict(merged)
        merged["endpoint"] = {**merged["endpoint"], "base_url": env_url}

    if int(merged["schema_version"]) != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {merged['schema_version']} unsupported; expected {SCHEMA_VERSION}"
        )

    try:
        weights = ObjectiveWeights(
            quality_weight=float(merged["weights"]["quality"]),
            reuse_weight=float(merged["weights"]["reuse"]),
            frustration_weight=float(merged["weights"]["frustration"]),
            cost_weight=float(merged["weights"]["cost"]),
            peak_weight=float(merged["weights"]["peak"]),
            end_weight=float(merged["weights"]["end"]),
        )
        signal = SignalConfig(
            proxy_weights=tuple(float(w) for w in merged["signal"]["proxy_weights"]),
            ngram_order=int(merged["signal"]["ngram_order"]),
            smoothing=float(merged["signal"]["smoothing"]),
        )
        detection = DetectionConfig(
            quality_floor=float(merged["detection"]["quality_floor"]),
            drop_threshold=float(merged["detection"]["drop_threshold"]),
            frustration_threshold=float(merged["detection"]["frustration_threshold"]),
        )
        sched = merged["scheduler"]
        scheduler_cfg = SchedulerConfig(
            signal=signal,
            detection=detection,
            skim_fraction=float(sched["skim_fraction"]),
            monitor_overhead=int(sched["monitor_overhead"]),
            max_repairs=int(sched["max_repairs"]),
            repair_factor=float(sched["repair_factor"]),
            ending_threshold=float(sched["ending_threshold"]),
        )
        reuse = ReuseParams(
            quality_gain=float(merged["reuse"]["quality_gain"]),
            frustration_gain=float(merged["reuse"]["frustration_gain"]),
            bias=float(merged["reuse"]["bias"]),
        )
        abm = _build_abm(merged["abm"])
        endpoint = ModelEndpoint(
            base_url=str(merged["endpoint"]["base_url"]),
            model_id=str(merged["endpoint"]["model_id"]),
            timeout=float(merged["endpoint"]["timeout"]),
            max_retries=int(merged["endpoint"]["max_retries"]),
            backoff_base=float(merged["endpoint"]["backoff_base"]),
        )
        decoding = DecodingParams(
            temperature=float(merged["decoding"]["temperature"]),
            top_p=float(merged["decoding"]["top_p"]),
        )
        role_split = tuple(float(r) for r in merged["role_split"])
        if len(role_split) != 3:
            raise ConfigError("role_split must have exactly 3 ratios")
        blocks = {
            name: _parse_block(name, spec, abm)
            for name, spec in merged["blocks"].items()
        }
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc

    settings = RuntimeSettings(
        weights=weights,
        reuse=reuse,
        scheduler=scheduler_cfg,
        endpoint=endpoint,
        decoding=decoding,
        role_split=role_split,  # type: ignore[arg-type]
        critic_grading=bool(merged["critic_grading"]),
    )
    serializable = {k: v for k, v in merged.items()}
    return AppConfig(
        stats_seed=int(merged["stats_seed"]),
        output_dir=str(merged["output_dir"]),
        workers=int(merged["workers"]),
        resamples=int(merged["resamples"]),
        settings=settings,
        abm=abm,
        blocks=blocks,
        source_path=path,
        raw=serializable,
    )
