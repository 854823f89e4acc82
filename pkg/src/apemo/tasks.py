"""Fixed, versioned list of planning/reasoning task prompts.

Episodes within a run cycle through this list so each episode gets a
distinct task while runs stay reproducible. Bump TASKS_VERSION whenever
the wording changes; the version is stamped into run manifests.
"""

TASKS_VERSION = 1

TASKS: tuple[str, ...] = (
    "Plan a three-city delivery route and estimate total fuel cost and schedule risks.",
    "Design a weekly study schedule for an exam, balancing topics and rest periods.",
    "Outline a migration plan moving a service database with minimal downtime.",
    "Draft a budget proposal for a small robotics workshop including tooling costs.",
    "Plan an incident response runbook for a web outage with escalation steps.",
    "Sketch a rollout strategy for a feature flag across three user cohorts.",
    "Organize a two-day team offsite agenda with sessions, logistics, and backup plans.",
    "Plan a data backfill pipeline with validation checkpoints and failure recovery.",
    "Propose a staffing rotation for supporting a production system around the clock.",
    "Lay out a testing strategy for a payment integration covering edge cases.",
)
