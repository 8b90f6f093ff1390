"""Polling runner agent.

One agent runs in each computational environment: it polls the coordinator
for leases matching its registration, clones the repository at the leased
commit into a private workspace, drives the configured executor through the
script lines, and reports a terminal status plus artifacts. Every claimed
lease ends in exactly one terminal update, even when the executor blows up.
"""

from __future__ import annotations

import logging
import shutil
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..coordinator.core import JobLease
from ..executors import (
    ExecutorConfigError,
    ExecutorRequest,
    JobResult,
    StepResult,
    Workspace,
    make_executor,
)
from .client import ApiError, CoordinatorClient, TransportError

log = logging.getLogger(__name__)

MAX_BACKOFF = 60.0


@dataclass
class RunnerConfig:
    coordinator_url: str
    token: str
    executor_kind: str = "shell"
    concurrency: int = 1
    workspace_root: str = "./workspaces"
    poll_interval: float = 1.0
    executor_settings: dict[str, str] = field(default_factory=dict)
    step_timeout: float | None = None
    failure_retention: float = 600.0  # seconds a failed workspace is kept

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


class WorkspaceError(Exception):
    """Clone or checkout failed; the job is reported failed with the log."""


def prepare_workspace(lease: JobLease, config: RunnerConfig) -> Workspace:
    """Fresh private directory holding the repository at the leased commit."""
    root = Path(config.workspace_root) / lease.lease_id
    repo_dir = root / "repo"
    root.mkdir(parents=True, exist_ok=True)

    def git(*args: str, cwd: Path | None = None) -> None:
        proc = subprocess.run(
            ["git", *args],
            cwd=cwd,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
        )
        if proc.returncode != 0:
            raise WorkspaceError(
                f"CLONE_ERROR: git {' '.join(args)} failed:\n{proc.stdout.decode(errors='replace')}"
            )

    git("clone", "--quiet", lease.repo_url, str(repo_dir))
    git("-c", "advice.detachedHead=false", "checkout", "--quiet", lease.commit, cwd=repo_dir)
    return Workspace(root=str(root), repo_dir=str(repo_dir))


def execute_job(
    lease: JobLease,
    workspace: Workspace,
    executor,
    step_timeout: float | None = None,
) -> JobResult:
    """Run the script through the executor, stopping at the first nonzero
    exit. Whole-job executors (batch, kubernetes) submit once and report
    per-step results parsed from their wrapper output."""
    job = lease.job
    if not getattr(executor, "per_step", True):
        return executor.run_job(job, workspace)

    steps: list[StepResult] = []
    chunks: list[bytes] = []
    status = "success"
    for index, command in enumerate(job.script):
        chunks.append(f"--- step {index}: {command}\n".encode())
        request = ExecutorRequest(job=job, workspace=workspace, step_index=index, command=command)
        started = time.monotonic()
        exit_code, output = executor.run_step(request, timeout=step_timeout)
        duration = time.monotonic() - started
        chunks.append(output)
        chunks.append(f"--- step {index} exited {exit_code}\n".encode())
        steps.append(StepResult(command=command, exit_code=exit_code, duration=duration))
        if exit_code != 0:
            status = "failed"
            break
    return JobResult(status=status, step_results=steps, log=b"".join(chunks))


def collect_artifacts(
    lease: JobLease, workspace: Workspace, client: CoordinatorClient
) -> tuple[list[str], bytes]:
    """Upload every declared artifact present in the workspace. Missing
    declared paths warn; upload rejections are logged, never fatal."""
    uploaded: list[str] = []
    notes: list[bytes] = []
    repo_dir = Path(workspace.repo_dir)
    for relative in lease.artifact_manifest:
        path = repo_dir / relative
        if not path.is_file():
            notes.append(f"warning: declared artifact {relative!r} not produced\n".encode())
            continue
        try:
            artifact_id = client.upload_artifact(lease.lease_id, relative, path.read_bytes())
            uploaded.append(artifact_id)
        except (ApiError, TransportError) as exc:
            notes.append(f"warning: upload of {relative!r} rejected: {exc}\n".encode())
    return uploaded, b"".join(notes)


class RunnerAgent:
    def __init__(self, config: RunnerConfig, client: CoordinatorClient | None = None):
        self.config = config
        self.client = client or CoordinatorClient(config.coordinator_url, token=config.token)
        self.shutdown = threading.Event()
        self._failed_workspaces: dict[str, float] = {}

    def run_loop(self) -> None:
        """Poll until shutdown; coordinator outages back off exponentially."""
        backoff = self.config.poll_interval
        with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
            in_flight: set = set()
            while not self.shutdown.is_set():
                in_flight = {f for f in in_flight if not f.done()}
                self._purge_failed_workspaces()
                if len(in_flight) >= self.config.concurrency:
                    self.shutdown.wait(self.config.poll_interval)
                    continue
                try:
                    lease = self.client.poll()
                    backoff = self.config.poll_interval
                except TransportError as exc:
                    log.warning("coordinator unreachable: %s; retrying in %.1fs", exc, backoff)
                    self.shutdown.wait(backoff)
                    backoff = min(backoff * 2, MAX_BACKOFF)
                    continue
                except ApiError as exc:
                    log.error("poll rejected: %s", exc)
                    self.shutdown.wait(self.config.poll_interval)
                    continue
                if lease is None:
                    self.shutdown.wait(self.config.poll_interval)
                    continue
                log.info("claimed lease %s (job %s)", lease.lease_id, lease.job.name)
                in_flight.add(pool.submit(self.process_lease, lease))

    def stop(self) -> None:
        self.shutdown.set()

    def process_lease(self, lease: JobLease) -> None:
        """Drive one lease to a terminal status, containing every failure."""
        workspace: Workspace | None = None
        try:
            workspace = prepare_workspace(lease, self.config)
            executor = make_executor(self.config.executor_kind, self.config.executor_settings)
            result = execute_job(lease, workspace, executor, self.config.step_timeout)
            uploaded, notes = collect_artifacts(lease, workspace, self.client)
            if uploaded:
                log.info("uploaded %d artifact(s) for %s", len(uploaded), lease.job.name)
            self._report(lease, result.status, result.log + notes)
            self._cleanup(workspace, failed=result.status != "success")
        except WorkspaceError as exc:
            self._report(lease, "failed", str(exc).encode())
            if workspace:
                self._cleanup(workspace, failed=True)
        except ExecutorConfigError as exc:
            self._report(lease, "failed", f"CONFIG_ERROR: {exc}\n".encode())
            if workspace:
                self._cleanup(workspace, failed=True)
        except Exception as exc:  # noqa: BLE001 - never leave a lease dangling
            log.exception("executor crashed for lease %s", lease.lease_id)
            self._report(lease, "failed", f"EXECUTOR_UNAVAILABLE: {exc!r}\n".encode())
            if workspace:
                self._cleanup(workspace, failed=True)

    def _report(self, lease: JobLease, status: str, log_bytes: bytes) -> None:
        try:
            self.client.update_status(lease.lease_id, status, log_bytes)
        except (ApiError, TransportError) as exc:
            log.error("terminal report for lease %s failed: %s", lease.lease_id, exc)

    def _cleanup(self, workspace: Workspace, failed: bool) -> None:
        if failed:
            # Keep the workspace around for debugging, purge later.
            self._failed_workspaces[workspace.root] = time.monotonic()
            return
        shutil.rmtree(workspace.root, ignore_errors=True)

    def _purge_failed_workspaces(self) -> None:
        cutoff = time.monotonic() - self.config.failure_retention
        for root, stamped in list(self._failed_workspaces.items()):
            if stamped < cutoff:
                shutil.rmtree(root, ignore_errors=True)
                del self._failed_workspaces[root]
