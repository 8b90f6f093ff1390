"""Coordinator state and operations.

The coordinator is the single authority for pipeline runs: it stores
submitted definitions, registers runners, leases pending jobs to
tag-matched runners over a pull protocol, ingests statuses, logs, and
artifacts, and spawns dynamic child pipelines.

Persistence is an append-only event log. Derived steps (releasing the next
stage, skipping after failure) are never logged; replaying the externally
driven events through the same code paths reconstructs an equivalent state.
"""

from __future__ import annotations

import hashlib
import logging
import posixpath
import threading
import uuid
from base64 import b64decode, b64encode
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable

from ..model import (
    PipelineDefinition,
    PipelineSchemaError,
    PipelineSyntaxError,
    ResolvedJobSpec,
    ValidationReport,
    parse_pipeline,
    validate_pipeline,
)
from ..scheduler import (
    ExecutionState,
    JobStatus,
    build_plan,
    initial_state,
    pipeline_status,
    ready_jobs,
    record_transition,
)
from .eventlog import EventLog

log = logging.getLogger(__name__)

EXECUTOR_KINDS = ("shell", "container", "batch", "kubernetes")

DEFAULT_LEASE_TTL = 600.0
DEFAULT_MAX_CHILD_DEPTH = 5
DEFAULT_MAX_ARTIFACT_BYTES = 64 * 1024 * 1024


class CoordinatorError(Exception):
    code = "COORDINATOR_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class ValidationFailed(CoordinatorError):
    code = "VALIDATION_FAILED"

    def __init__(self, report: ValidationReport, message: str = "pipeline failed validation"):
        self.report = report
        super().__init__(message)


class AuthenticationError(CoordinatorError):
    code = "AUTHENTICATION_FAILED"


class NotFound(CoordinatorError):
    code = "NOT_FOUND"


class StaleLease(CoordinatorError):
    code = "STALE_LEASE"


class PathTraversal(CoordinatorError):
    code = "PATH_TRAVERSAL"


class PayloadTooLarge(CoordinatorError):
    code = "PAYLOAD_TOO_LARGE"


class DepthExceeded(CoordinatorError):
    code = "DEPTH_EXCEEDED"


class BadRequest(CoordinatorError):
    code = "BAD_REQUEST"


@dataclass(frozen=True)
class RunnerRegistration:
    runner_id: str
    name: str
    tags: frozenset[str]
    executor_kind: str
    run_untagged: bool
    token: str


@dataclass
class JobLease:
    lease_id: str
    pipeline_id: str
    job: ResolvedJobSpec
    repo_url: str
    commit: str
    artifact_manifest: list[str]
    deadline: datetime
    runner_id: str

    def to_dict(self) -> dict:
        return {
            "lease_id": self.lease_id,
            "pipeline_id": self.pipeline_id,
            "job": self.job.to_dict(),
            "repo": {"url": self.repo_url, "commit": self.commit},
            "artifact_manifest": list(self.artifact_manifest),
            "deadline": self.deadline.isoformat(),
        }

    @classmethod
    def from_dict(cls, data: dict, runner_id: str = "") -> "JobLease":
        return cls(
            lease_id=data["lease_id"],
            pipeline_id=data["pipeline_id"],
            job=ResolvedJobSpec.from_dict(data["job"]),
            repo_url=data["repo"]["url"],
            commit=data["repo"]["commit"],
            artifact_manifest=list(data.get("artifact_manifest", [])),
            deadline=datetime.fromisoformat(data["deadline"]),
            runner_id=runner_id,
        )


@dataclass
class ArtifactRecord:
    artifact_id: str
    pipeline_id: str
    job: str
    path: str
    size: int


@dataclass
class PipelineRunRecord:
    pipeline_id: str
    repo_url: str
    commit: str
    definition_source: str
    definition: PipelineDefinition
    state: ExecutionState
    created_at: datetime
    parent: tuple[str, str] | None = None
    depth: int = 0
    children: list[str] = field(default_factory=list)
    artifacts: list[ArtifactRecord] = field(default_factory=list)
    logs: dict[str, bytearray] = field(default_factory=dict)


def _isoformat(dt: datetime | None) -> str | None:
    return dt.isoformat() if dt else None


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def check_relative_path(path: str) -> str:
    """Reject absolute paths and parent-directory traversal."""
    normalized = posixpath.normpath(path)
    if path.startswith(("/", "\\")) or normalized.startswith("..") or normalized == ".":
        raise PathTraversal(f"artifact path {path!r} escapes the workspace")
    return normalized


class Coordinator:
    """In-memory coordinator state, optionally backed by an event log.

    All public methods are thread safe; transitions within one pipeline are
    applied in a single total order under the coordinator lock.
    """

    def __init__(
        self,
        log_path: str | None = None,
        lease_ttl: float = DEFAULT_LEASE_TTL,
        max_child_depth: int = DEFAULT_MAX_CHILD_DEPTH,
        max_artifact_bytes: int = DEFAULT_MAX_ARTIFACT_BYTES,
        retry_after: float = 1.0,
        clock: Callable[[], datetime] | None = None,
    ):
        self._lock = threading.RLock()
        self.lease_ttl = lease_ttl
        self.max_child_depth = max_child_depth
        self.max_artifact_bytes = max_artifact_bytes
        self.retry_after = retry_after
        self._clock = clock or (lambda: datetime.now(timezone.utc))

        self._pipelines: dict[str, PipelineRunRecord] = {}
        self._runners: dict[str, RunnerRegistration] = {}
        self._runners_by_token: dict[str, RunnerRegistration] = {}
        self._leases: dict[str, JobLease] = {}
        self._live_lease_by_job: dict[tuple[str, str], str] = {}
        self._artifact_payloads: dict[str, bytes] = {}

        self._log: EventLog | None = None
        if log_path is not None:
            for event in EventLog.read(log_path):
                self._replay_event(event)
            self._log = EventLog(log_path)

    # -- internals ---------------------------------------------------------

    def _now(self) -> datetime:
        return self._clock()

    def _append(self, event: dict) -> None:
        if self._log is not None:
            self._log.append(event)

    def _replay_event(self, event: dict) -> None:
        kind = event["type"]
        at = datetime.fromisoformat(event["at"]) if "at" in event else None
        if kind == "pipeline_submitted":
            parent = tuple(event["parent"]) if event.get("parent") else None
            self._do_submit(
                event["repo_url"],
                event["commit"],
                event["source"],
                pipeline_id=event["pipeline_id"],
                parent=parent,
                at=at,
                replay=True,
            )
        elif kind == "runner_registered":
            reg = RunnerRegistration(
                runner_id=event["runner_id"],
                name=event["name"],
                tags=frozenset(event["tags"]),
                executor_kind=event["executor_kind"],
                run_untagged=event["run_untagged"],
                token=event["token"],
            )
            self._runners[reg.runner_id] = reg
            self._runners_by_token[reg.token] = reg
        elif kind == "lease_issued":
            self._do_issue_lease(
                pipeline_id=event["pipeline_id"],
                job=event["job"],
                runner_id=event["runner_id"],
                lease_id=event["lease_id"],
                deadline=datetime.fromisoformat(event["deadline"]),
                at=at,
                replay=True,
            )
        elif kind == "job_transition":
            self._do_transition(
                event["pipeline_id"], event["job"], JobStatus(event["to"]), at, replay=True
            )
        elif kind == "lease_consumed":
            self._consume_lease(event["lease_id"])
        elif kind == "lease_expired":
            self._do_expire(event["lease_id"], at, replay=True)
        elif kind == "job_log":
            record = self._pipelines[event["pipeline_id"]]
            record.logs.setdefault(event["job"], bytearray()).extend(b64decode(event["data"]))
        elif kind == "artifact_uploaded":
            self._do_store_artifact(
                pipeline_id=event["pipeline_id"],
                job=event["job"],
                path=event["path"],
                payload=b64decode(event["payload"]),
                replay=True,
            )
        else:
            log.warning("unknown event type %r in log, skipping", kind)

    # -- pipelines ---------------------------------------------------------

    def submit_pipeline(
        self,
        repo_url: str,
        commit: str,
        definition_source: str,
        parent: tuple[str, str] | None = None,
    ) -> str:
        with self._lock:
            return self._do_submit(repo_url, commit, definition_source, parent=parent)

    def _do_submit(
        self,
        repo_url: str,
        commit: str,
        definition_source: str,
        pipeline_id: str | None = None,
        parent: tuple[str, str] | None = None,
        at: datetime | None = None,
        replay: bool = False,
    ) -> str:
        try:
            definition = parse_pipeline(definition_source)
        except (PipelineSyntaxError, PipelineSchemaError) as exc:
            report = ValidationReport()
            report.error("PARSE_ERROR", str(exc))
            raise ValidationFailed(report) from exc
        report = validate_pipeline(definition)
        if not report.ok:
            raise ValidationFailed(report)

        depth = 0
        if parent is not None:
            parent_record = self._pipelines[parent[0]]
            depth = parent_record.depth + 1
            if depth > self.max_child_depth:
                raise DepthExceeded(f"child pipeline depth {depth} exceeds {self.max_child_depth}")

        pipeline_id = pipeline_id or f"pl-{uuid.uuid4().hex[:12]}"
        at = at or self._now()
        plan = build_plan(definition, pipeline_id)
        state = initial_state(plan)
        record = PipelineRunRecord(
            pipeline_id=pipeline_id,
            repo_url=repo_url,
            commit=commit,
            definition_source=definition_source,
            definition=definition,
            state=state,
            created_at=at,
            parent=parent,
            depth=depth,
        )
        self._pipelines[pipeline_id] = record
        if parent is not None:
            self._pipelines[parent[0]].children.append(pipeline_id)
        if not replay:
            self._append(
                {
                    "type": "pipeline_submitted",
                    "pipeline_id": pipeline_id,
                    "repo_url": repo_url,
                    "commit": commit,
                    "source": definition_source,
                    "parent": list(parent) if parent else None,
                    "at": at.isoformat(),
                }
            )
        self._release_ready(record, at)
        return pipeline_id

    def _release_ready(self, record: PipelineRunRecord, at: datetime) -> None:
        # Derived step, never logged: created jobs of the released stage
        # become pending (eligible for lease).
        for job in sorted(ready_jobs(record.state)):
            record.state = record_transition(record.state, job, JobStatus.PENDING, at)

    # -- runners -----------------------------------------------------------

    def register_runner(
        self,
        name: str,
        tags: set[str] | frozenset[str],
        executor_kind: str,
        run_untagged: bool,
    ) -> tuple[str, str]:
        if not name:
            raise BadRequest("runner name must be nonempty")
        if executor_kind not in EXECUTOR_KINDS:
            raise BadRequest(f"unknown executor kind {executor_kind!r}")
        for tag in tags:
            if not tag or any(ch.isspace() for ch in tag):
                raise BadRequest(f"tag {tag!r} is empty or contains whitespace")
        with self._lock:
            reg = RunnerRegistration(
                runner_id=f"rn-{uuid.uuid4().hex[:12]}",
                name=name,
                tags=frozenset(tags),
                executor_kind=executor_kind,
                run_untagged=run_untagged,
                token=uuid.uuid4().hex,
            )
            self._runners[reg.runner_id] = reg
            self._runners_by_token[reg.token] = reg
            self._append(
                {
                    "type": "runner_registered",
                    "runner_id": reg.runner_id,
                    "name": reg.name,
                    "tags": sorted(reg.tags),
                    "executor_kind": reg.executor_kind,
                    "run_untagged": reg.run_untagged,
                    "token": reg.token,
                }
            )
            return reg.runner_id, reg.token

    def _authenticate(self, token: str) -> RunnerRegistration:
        reg = self._runners_by_token.get(token)
        if reg is None:
            raise AuthenticationError("unknown runner token")
        return reg

    # -- leasing -----------------------------------------------------------

    def poll_job(self, token: str) -> JobLease | None:
        """Atomically claim one matching pending job for the runner, FIFO by
        (pipeline submission time, stage index, job document order)."""
        with self._lock:
            runner = self._authenticate(token)
            now = self._now()
            self.expire_leases(now)
            for record in self._pipelines.values():  # insertion = submission order
                candidates = [
                    (spec.stage_index, doc_order, name)
                    for doc_order, (name, spec) in enumerate(record.state.plan.job_specs.items())
                    if record.state.statuses[name] is JobStatus.PENDING
                ]
                for _stage_index, _doc_order, name in sorted(candidates):
                    spec = record.state.plan.job_specs[name]
                    if spec.tags:
                        if not set(spec.tags) <= runner.tags:
                            continue
                    elif not runner.run_untagged:
                        continue
                    return self._do_issue_lease(
                        pipeline_id=record.pipeline_id,
                        job=name,
                        runner_id=runner.runner_id,
                        lease_id=f"ls-{uuid.uuid4().hex[:12]}",
                        deadline=now + timedelta(seconds=self.lease_ttl),
                        at=now,
                    )
            return None

    def _do_issue_lease(
        self,
        pipeline_id: str,
        job: str,
        runner_id: str,
        lease_id: str,
        deadline: datetime,
        at: datetime | None = None,
        replay: bool = False,
    ) -> JobLease:
        record = self._pipelines[pipeline_id]
        at = at or self._now()
        record.state = record_transition(record.state, job, JobStatus.RUNNING, at)
        lease = JobLease(
            lease_id=lease_id,
            pipeline_id=pipeline_id,
            job=record.state.plan.job_specs[job],
            repo_url=record.repo_url,
            commit=record.commit,
            artifact_manifest=list(record.definition.jobs[job].artifacts),
            deadline=deadline,
            runner_id=runner_id,
        )
        self._leases[lease_id] = lease
        self._live_lease_by_job[(pipeline_id, job)] = lease_id
        if not replay:
            self._append(
                {
                    "type": "lease_issued",
                    "lease_id": lease_id,
                    "pipeline_id": pipeline_id,
                    "job": job,
                    "runner_id": runner_id,
                    "deadline": deadline.isoformat(),
                    "at": at.isoformat(),
                }
            )
        return lease

    def _live_lease(self, lease_id: str) -> JobLease:
        lease = self._leases.get(lease_id)
        if lease is None:
            raise StaleLease(f"lease {lease_id!r} is unknown or already consumed")
        return lease

    def _consume_lease(self, lease_id: str) -> None:
        lease = self._leases.pop(lease_id, None)
        if lease is not None:
            self._live_lease_by_job.pop((lease.pipeline_id, lease.job.name), None)

    def expire_leases(self, now: datetime | None = None) -> list[str]:
        """Requeue jobs whose leases ran past their deadline."""
        with self._lock:
            now = now or self._now()
            expired = [lid for lid, lease in self._leases.items() if lease.deadline < now]
            for lease_id in expired:
                self._do_expire(lease_id, now)
            return expired

    def _do_expire(self, lease_id: str, at: datetime | None, replay: bool = False) -> None:
        lease = self._leases.get(lease_id)
        if lease is None:
            return
        at = at or self._now()
        record = self._pipelines[lease.pipeline_id]
        self._consume_lease(lease_id)
        if record.state.statuses[lease.job.name] is JobStatus.RUNNING:
            record.state = record_transition(record.state, lease.job.name, JobStatus.PENDING, at)
        if not replay:
            self._append({"type": "lease_expired", "lease_id": lease_id, "at": at.isoformat()})

    # -- status, logs ------------------------------------------------------

    def update_job(self, lease_id: str, to: JobStatus, log_chunk: bytes | None = None) -> None:
        with self._lock:
            self.expire_leases()
            lease = self._live_lease(lease_id)
            record = self._pipelines[lease.pipeline_id]
            at = self._now()
            if log_chunk:
                record.logs.setdefault(lease.job.name, bytearray()).extend(log_chunk)
                self._append(
                    {
                        "type": "job_log",
                        "pipeline_id": lease.pipeline_id,
                        "job": lease.job.name,
                        "data": b64encode(bytes(log_chunk)).decode("ascii"),
                    }
                )
            if to is JobStatus.RUNNING:
                return  # heartbeat; lease already put the job in running
            self._do_transition(lease.pipeline_id, lease.job.name, to, at)
            if to in (JobStatus.SUCCESS, JobStatus.FAILED):
                self._consume_lease(lease_id)
                self._append(
                    {"type": "lease_consumed", "lease_id": lease_id, "at": at.isoformat()}
                )

    def _do_transition(
        self,
        pipeline_id: str,
        job: str,
        to: JobStatus,
        at: datetime | None,
        replay: bool = False,
    ) -> None:
        record = self._pipelines[pipeline_id]
        at = at or self._now()
        record.state = record_transition(record.state, job, to, at)
        if not replay:
            self._append(
                {
                    "type": "job_transition",
                    "pipeline_id": pipeline_id,
                    "job": job,
                    "to": to.value,
                    "at": at.isoformat(),
                }
            )
        self._release_ready(record, at)

    # -- artifacts ---------------------------------------------------------

    def upload_artifact(self, lease_id: str, path: str, payload: bytes) -> str:
        with self._lock:
            self.expire_leases()
            lease = self._live_lease(lease_id)
            normalized = check_relative_path(path)
            if len(payload) > self.max_artifact_bytes:
                raise PayloadTooLarge(
                    f"artifact {path!r} is {len(payload)} bytes, cap {self.max_artifact_bytes}"
                )
            if lease.artifact_manifest and normalized not in lease.artifact_manifest:
                raise BadRequest(f"path {path!r} not declared in the artifact manifest")
            artifact_id = self._do_store_artifact(
                lease.pipeline_id, lease.job.name, normalized, payload
            )
            return artifact_id

    def _do_store_artifact(
        self, pipeline_id: str, job: str, path: str, payload: bytes, replay: bool = False
    ) -> str:
        artifact_id = content_hash(payload)
        record = self._pipelines[pipeline_id]
        if artifact_id not in self._artifact_payloads:
            self._artifact_payloads[artifact_id] = payload
        existing = [
            a
            for a in record.artifacts
            if a.artifact_id == artifact_id and a.job == job and a.path == path
        ]
        if not existing:
            record.artifacts.append(
                ArtifactRecord(
                    artifact_id=artifact_id,
                    pipeline_id=pipeline_id,
                    job=job,
                    path=path,
                    size=len(payload),
                )
            )
        if not replay:
            self._append(
                {
                    "type": "artifact_uploaded",
                    "artifact_id": artifact_id,
                    "pipeline_id": pipeline_id,
                    "job": job,
                    "path": path,
                    "payload": b64encode(payload).decode("ascii"),
                }
            )
        return artifact_id

    def get_artifact(self, artifact_id: str) -> bytes:
        with self._lock:
            payload = self._artifact_payloads.get(artifact_id)
            if payload is None:
                raise NotFound(f"artifact {artifact_id!r} not found")
            return payload

    # -- dynamic pipelines -------------------------------------------------

    def trigger_child_pipeline(self, lease_id: str, definition_artifact: str) -> str:
        with self._lock:
            self.expire_leases()
            lease = self._live_lease(lease_id)
            payload = self.get_artifact(definition_artifact)
            parent_record = self._pipelines[lease.pipeline_id]
            return self._do_submit(
                parent_record.repo_url,
                parent_record.commit,
                payload.decode("utf-8"),
                parent=(lease.pipeline_id, lease.job.name),
            )

    # -- views -------------------------------------------------------------

    def get_pipeline(self, pipeline_id: str) -> dict:
        with self._lock:
            record = self._pipelines.get(pipeline_id)
            if record is None:
                raise NotFound(f"pipeline {pipeline_id!r} not found")
            state = record.state
            jobs = {}
            for name, spec in state.plan.job_specs.items():
                stamps = state.timestamps[name]
                jobs[name] = {
                    "stage": spec.stage,
                    "status": state.statuses[name].value,
                    "queued": _isoformat(stamps.queued),
                    "started": _isoformat(stamps.started),
                    "finished": _isoformat(stamps.finished),
                }
            return {
                "pipeline_id": pipeline_id,
                "status": pipeline_status(state).value,
                "created_at": record.created_at.isoformat(),
                "repo": {"url": record.repo_url, "commit": record.commit},
                "parent": list(record.parent) if record.parent else None,
                "children": list(record.children),
                "jobs": jobs,
                "artifacts": [
                    {
                        "artifact_id": a.artifact_id,
                        "job": a.job,
                        "path": a.path,
                        "size": a.size,
                    }
                    for a in record.artifacts
                ],
            }

    def get_logs(self, pipeline_id: str, job: str) -> bytes:
        with self._lock:
            record = self._pipelines.get(pipeline_id)
            if record is None:
                raise NotFound(f"pipeline {pipeline_id!r} not found")
            if job not in record.state.plan.job_specs:
                raise NotFound(f"job {job!r} not found in pipeline {pipeline_id!r}")
            return bytes(record.logs.get(job, b""))

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
