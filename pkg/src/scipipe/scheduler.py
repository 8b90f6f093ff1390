"""Stage-ordered execution planning and the per-job state machine.

Stages are the only ordering mechanism: all jobs in a stage may run in
parallel, and a stage is released only once every job of every earlier
stage is terminal-success. Failure is handled fail-fast at stage
granularity: in-flight jobs of the failing stage finish, later-stage
``created`` jobs become ``skipped``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .model import PipelineDefinition, ResolvedJobSpec, resolve_job


class JobStatus(str, enum.Enum):
    CREATED = "created"
    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILED = "failed"
    SKIPPED = "skipped"


TERMINAL_STATUSES = frozenset({JobStatus.SUCCESS, JobStatus.FAILED, JobStatus.SKIPPED})

# running -> pending is the lease-expiry requeue path; every other edge is
# the ordinary lifecycle.
_LEGAL_TRANSITIONS: frozenset[tuple[JobStatus, JobStatus]] = frozenset(
    {
        (JobStatus.CREATED, JobStatus.PENDING),
        (JobStatus.PENDING, JobStatus.RUNNING),
        (JobStatus.RUNNING, JobStatus.SUCCESS),
        (JobStatus.RUNNING, JobStatus.FAILED),
        (JobStatus.CREATED, JobStatus.SKIPPED),
        (JobStatus.RUNNING, JobStatus.PENDING),
    }
)


class IllegalTransition(Exception):
    def __init__(self, job: str, current: JobStatus, to: JobStatus):
        self.job = job
        self.current = current
        self.to = to
        super().__init__(f"illegal transition for job '{job}': {current.value} -> {to.value}")


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class ExecutionPlan:
    pipeline_id: str
    ordered_stages: list[tuple[str, list[str]]]
    job_specs: dict[str, ResolvedJobSpec]


@dataclass(frozen=True)
class JobTimestamps:
    queued: datetime | None = None
    started: datetime | None = None
    finished: datetime | None = None


@dataclass(frozen=True)
class ExecutionState:
    plan: ExecutionPlan
    statuses: dict[str, JobStatus]
    timestamps: dict[str, JobTimestamps] = field(default_factory=dict)


def build_plan(definition: PipelineDefinition, pipeline_id: str) -> ExecutionPlan:
    """Group jobs by stage in document order and resolve every spec."""
    groups: dict[str, list[str]] = {stage: [] for stage in definition.stages}
    for name, job in definition.jobs.items():
        groups[job.stage].append(name)
    return ExecutionPlan(
        pipeline_id=pipeline_id,
        ordered_stages=[(stage, groups[stage]) for stage in definition.stages],
        job_specs={name: resolve_job(definition, name) for name in definition.jobs},
    )


def initial_state(plan: ExecutionPlan) -> ExecutionState:
    return ExecutionState(
        plan=plan,
        statuses={name: JobStatus.CREATED for name in plan.job_specs},
        timestamps={name: JobTimestamps() for name in plan.job_specs},
    )


def ready_jobs(state: ExecutionState) -> set[str]:
    """All ``created`` jobs of the earliest incomplete stage, provided every
    earlier stage is entirely terminal-success. Any failure anywhere yields
    the empty set (the pipeline is fail-fast)."""
    if any(status is JobStatus.FAILED for status in state.statuses.values()):
        return set()
    for _stage, jobs in state.plan.ordered_stages:
        if all(state.statuses[j] is JobStatus.SUCCESS for j in jobs):
            continue
        return {j for j in jobs if state.statuses[j] is JobStatus.CREATED}
    return set()


def record_transition(
    state: ExecutionState,
    job: str,
    to: JobStatus,
    at: datetime | None = None,
) -> ExecutionState:
    """Apply one legal transition, returning the new state.

    Entering ``failed`` cascades: every ``created`` job in a strictly later
    stage becomes ``skipped``. Running jobs of the failing stage are left to
    finish.
    """
    if job not in state.statuses:
        raise KeyError(f"unknown job '{job}'")
    current = state.statuses[job]
    if (current, to) not in _LEGAL_TRANSITIONS:
        raise IllegalTransition(job, current, to)

    at = at or _utcnow()
    statuses = dict(state.statuses)
    timestamps = dict(state.timestamps)
    statuses[job] = to
    stamps = timestamps.get(job, JobTimestamps())
    if to is JobStatus.PENDING:
        stamps = replace(stamps, queued=at, started=None)
    elif to is JobStatus.RUNNING:
        stamps = replace(stamps, started=at)
    elif to in TERMINAL_STATUSES:
        stamps = replace(stamps, finished=at)
    timestamps[job] = stamps

    if to is JobStatus.FAILED:
        failed_stage = _stage_index(state.plan, job)
        for idx, (_stage, jobs) in enumerate(state.plan.ordered_stages):
            if idx <= failed_stage:
                continue
            for other in jobs:
                if statuses[other] is JobStatus.CREATED:
                    statuses[other] = JobStatus.SKIPPED
                    timestamps[other] = replace(timestamps[other], finished=at)

    return ExecutionState(plan=state.plan, statuses=statuses, timestamps=timestamps)


def _stage_index(plan: ExecutionPlan, job: str) -> int:
    return plan.job_specs[job].stage_index


class PipelineStatus(str, enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILED = "failed"


def pipeline_status(state: ExecutionState) -> PipelineStatus:
    """Pure derivation: failed beats everything, success requires all jobs
    to have succeeded, anything else is still running."""
    statuses = state.statuses.values()
    if any(s is JobStatus.FAILED for s in statuses):
        return PipelineStatus.FAILED
    if all(s is JobStatus.SUCCESS for s in statuses):
        return PipelineStatus.SUCCESS
    return PipelineStatus.RUNNING
