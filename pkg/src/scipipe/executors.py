"""Per-environment execution strategies.

Four kinds:

- shell: runs each command in the host shell; the job's container image is
  ignored entirely.
- container: runs each command inside the job's image via a configurable
  runtime command template.
- batch: translates the job into one scheduler submission (SLURM_PARAMETERS
  becomes submitter flags, the script becomes a container-wrapped batch
  script fed on stdin) and blocks on completion.
- kubernetes: emits a pod manifest whose resource requests echo the
  KUBERNETES_* variables, executed through a pluggable pod runner.

Whole-job strategies (batch, kubernetes) report per-step exit codes by
embedding ``::step:<i>:exit:<rc>`` marker lines in their wrapper scripts.
"""

from __future__ import annotations

import shlex
import subprocess
import time
from dataclasses import dataclass, field

import yaml

STEP_MARKER_PREFIX = "::step:"


class ExecutorConfigError(Exception):
    """Job/executor mismatch detected before the first step runs."""

    code = "CONFIG_ERROR"


@dataclass(frozen=True)
class Workspace:
    root: str
    repo_dir: str


@dataclass(frozen=True)
class ExecutorRequest:
    job: "object"  # ResolvedJobSpec; untyped to keep this module import-light
    workspace: Workspace
    step_index: int
    command: str


@dataclass(frozen=True)
class StepResult:
    command: str
    exit_code: int
    duration: float


@dataclass
class JobResult:
    status: str  # "success" | "failed"
    step_results: list[StepResult]
    log: bytes


@dataclass(frozen=True)
class SubmissionCommand:
    argv: list[str]
    stdin_payload: str | None = None


def _run_argv(
    argv: list[str],
    cwd: str | None,
    env: dict[str, str] | None,
    timeout: float | None = None,
    stdin: str | None = None,
) -> tuple[int, bytes]:
    import os

    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    try:
        proc = subprocess.run(
            argv,
            cwd=cwd,
            env=full_env,
            input=stdin.encode() if stdin is not None else None,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            timeout=timeout,
        )
        return proc.returncode, proc.stdout or b""
    except subprocess.TimeoutExpired as exc:
        partial = exc.stdout or b""
        return 124, partial + b"\nTIMEOUT: step exceeded its wall-time limit\n"
    except OSError as exc:
        # Spawn failure: synthesize the conventional not-found exit code.
        return 127, f"spawn failure: {exc}\n".encode()


# -- shell ------------------------------------------------------------------


def shell_execute(req: ExecutorRequest, timeout: float | None = None) -> tuple[int, bytes]:
    """Run one command in the host shell; the job image has no effect."""
    return _run_argv(
        ["/bin/sh", "-c", req.command],
        cwd=req.workspace.repo_dir,
        env=dict(req.job.variables),
        timeout=timeout,
    )


# -- container --------------------------------------------------------------

DEFAULT_CONTAINER_TEMPLATE = "docker run --rm -v {workdir}:{workdir} -w {workdir} {env_flags} {image}"


def container_execute(
    req: ExecutorRequest,
    settings: dict[str, str] | None = None,
    timeout: float | None = None,
) -> tuple[int, bytes]:
    """Run one command inside the job's image.

    The runtime invocation comes from the ``container_command`` setting, a
    template with ``{image}``, ``{workdir}``, and optional ``{env_flags}``
    placeholders; the command is appended as ``sh -c <command>``. An empty
    template degrades to a plain host process (useful for desk-scale tests).
    """
    settings = settings or {}
    if not req.job.image:
        raise ExecutorConfigError(
            f"job '{req.job.name}' has no image; the container executor requires one"
        )
    template = settings.get("container_command", DEFAULT_CONTAINER_TEMPLATE)
    env_flags = " ".join(
        f"-e {shlex.quote(f'{k}={v}')}" for k, v in sorted(req.job.variables.items())
    )
    prefix = template.format(
        image=req.job.image, workdir=req.workspace.repo_dir, env_flags=env_flags
    ).strip()
    argv = shlex.split(prefix) + ["sh", "-c", req.command] if prefix else [
        "sh",
        "-c",
        req.command,
    ]
    return _run_argv(
        argv,
        cwd=req.workspace.repo_dir,
        env=dict(req.job.variables),
        timeout=timeout,
    )


# -- batch ------------------------------------------------------------------


def _wrapper_script(
    script: list[str],
    repo_dir: str,
    runtime_prefix: str,
    variables: dict[str, str],
) -> str:
    """Sequential wrapper with stop-at-first-failure and per-step markers."""
    lines = ["#!/bin/sh", f"cd {shlex.quote(repo_dir)}"]
    for key, value in sorted(variables.items()):
        lines.append(f"export {key}={shlex.quote(value)}")
    for index, command in enumerate(script):
        step = f"/bin/sh -c {shlex.quote(command)}"
        if runtime_prefix:
            step = f"{runtime_prefix} {step}"
        lines.append(step)
        lines.append("rc=$?")
        lines.append(f'echo "{STEP_MARKER_PREFIX}{index}:exit:$rc"')
        lines.append('if [ "$rc" -ne 0 ]; then exit "$rc"; fi')
    lines.append("exit 0")
    return "\n".join(lines) + "\n"


def _scheduler_variables(variables: dict[str, str]) -> dict[str, str]:
    # Scheduler-direction variables are consumed by the translators, not the
    # job environment; stripping them keeps each translator's output
    # independent of the other scheduler's settings.
    return {
        k: v
        for k, v in variables.items()
        if k != "SLURM_PARAMETERS" and not k.startswith("KUBERNETES_")
    }


def batch_translate(job, workspace: Workspace, settings: dict[str, str] | None = None) -> SubmissionCommand:
    """Turn a resolved job into one blocking scheduler submission.

    SLURM_PARAMETERS is whitespace-tokenized verbatim into the submitter
    argv; the stdin payload wraps every script line in the container runtime
    and stops at the first failure.
    """
    settings = settings or {}
    parameters = job.variables.get("SLURM_PARAMETERS")
    if parameters is None or not parameters.split():
        raise ExecutorConfigError(
            f"job '{job.name}' has no SLURM_PARAMETERS; the batch executor requires them"
        )
    if '"' in parameters or "'" in parameters:
        raise ExecutorConfigError(
            "quoted values in SLURM_PARAMETERS are not supported (plain whitespace split)"
        )
    if not job.image:
        raise ExecutorConfigError(
            f"job '{job.name}' has no image; the batch executor requires one"
        )
    submitter = settings.get("submitter", "sbatch")
    runtime_template = settings.get("batch_runtime", "singularity exec docker://{image}")
    runtime_prefix = runtime_template.format(image=job.image).strip()
    payload = _wrapper_script(
        job.script, workspace.repo_dir, runtime_prefix, _scheduler_variables(job.variables)
    )
    argv = [submitter, "--wait", *parameters.split()]
    return SubmissionCommand(argv=argv, stdin_payload=payload)


def batch_execute(cmd: SubmissionCommand, submitter=None) -> tuple[int, bytes]:
    """Submit and block until the scheduler reports completion.

    ``submitter`` may be an in-process callable (SubmissionCommand ->
    (exit_code, output)); by default the argv is executed as a subprocess.
    """
    if submitter is not None:
        return submitter(cmd)
    return _run_argv(cmd.argv, cwd=None, env=None, stdin=cmd.stdin_payload)


# -- kubernetes -------------------------------------------------------------


@dataclass(frozen=True)
class PodManifest:
    image: str
    command: list[str]
    working_dir: str
    cpu_request: str
    memory_request: str
    env: dict[str, str] = field(default_factory=dict)

    def to_document(self) -> str:
        """Stable-key-order serialization, suitable for byte comparison."""
        doc = {
            "apiVersion": "v1",
            "kind": "Pod",
            "spec": {
                "restartPolicy": "Never",
                "containers": [
                    {
                        "name": "job",
                        "image": self.image,
                        "workingDir": self.working_dir,
                        "command": list(self.command),
                        "env": [
                            {"name": k, "value": v} for k, v in sorted(self.env.items())
                        ],
                        "resources": {
                            "requests": {
                                "cpu": self.cpu_request,
                                "memory": self.memory_request,
                            }
                        },
                    }
                ],
            },
        }
        return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def k8s_manifest(job, workspace: Workspace | None = None) -> PodManifest:
    """Build the pod manifest for one job.

    Resource requests echo KUBERNETES_CPU_REQUEST / KUBERNETES_MEMORY_REQUEST
    exactly; SLURM_PARAMETERS never influences the output; no wall-time field
    is emitted (pods are released when the job completes).
    """
    if not job.image:
        raise ExecutorConfigError(
            f"job '{job.name}' has no image; the kubernetes executor requires one"
        )
    cpu = job.variables.get("KUBERNETES_CPU_REQUEST")
    memory = job.variables.get("KUBERNETES_MEMORY_REQUEST")
    if cpu is None or memory is None:
        raise ExecutorConfigError(
            f"job '{job.name}' is missing KUBERNETES_CPU_REQUEST or KUBERNETES_MEMORY_REQUEST"
        )
    working_dir = workspace.repo_dir if workspace else "/workspace"
    script_body = _wrapper_script(job.script, working_dir, "", _scheduler_variables(job.variables))
    return PodManifest(
        image=job.image,
        command=["/bin/sh", "-c", script_body],
        working_dir=working_dir,
        cpu_request=cpu,
        memory_request=memory,
        env=_scheduler_variables(job.variables),
    )


def k8s_execute(manifest: PodManifest, pod_runner, dry_run: bool = False) -> tuple[int, bytes]:
    """Run the pod through the submission boundary.

    ``pod_runner`` is a callable (PodManifest -> (exit_code, output)). In
    dry-run mode the serialized manifest is returned instead of executing.
    """
    if dry_run:
        return 0, manifest.to_document().encode()
    return pod_runner(manifest)


def mock_pod_runner(manifest: PodManifest) -> tuple[int, bytes]:
    """Desk-scale pod runner: executes the manifest command as a local
    process (the image is taken on faith)."""
    return _run_argv(
        list(manifest.command), cwd=manifest.working_dir, env=dict(manifest.env)
    )


def parse_step_markers(output: bytes, script: list[str]) -> list[StepResult]:
    """Recover per-step exit codes from wrapper marker lines."""
    results: list[StepResult] = []
    for line in output.decode(errors="replace").splitlines():
        if line.startswith(STEP_MARKER_PREFIX):
            try:
                index_text, _, rc_text = line[len(STEP_MARKER_PREFIX):].split(":")
                index, rc = int(index_text), int(rc_text)
            except ValueError:
                continue
            if 0 <= index < len(script):
                results.append(StepResult(command=script[index], exit_code=rc, duration=0.0))
    return results


# -- strategy objects -------------------------------------------------------


class ShellExecutor:
    """Per-step host-shell execution (image ignored)."""

    kind = "shell"
    per_step = True

    def __init__(self, settings: dict[str, str] | None = None):
        self.settings = settings or {}

    def run_step(self, req: ExecutorRequest, timeout: float | None = None) -> tuple[int, bytes]:
        return shell_execute(req, timeout=timeout)


class ContainerExecutor:
    kind = "container"
    per_step = True

    def __init__(self, settings: dict[str, str] | None = None):
        self.settings = settings or {}

    def run_step(self, req: ExecutorRequest, timeout: float | None = None) -> tuple[int, bytes]:
        return container_execute(req, self.settings, timeout=timeout)


class BatchExecutor:
    """Whole-job strategy: one scheduler submission per job."""

    kind = "batch"
    per_step = False

    def __init__(self, settings: dict[str, str] | None = None, submitter=None):
        self.settings = settings or {}
        self.submitter = submitter

    def run_job(self, job, workspace: Workspace) -> JobResult:
        started = time.monotonic()
        cmd = batch_translate(job, workspace, self.settings)
        exit_code, output = batch_execute(cmd, self.submitter)
        steps = parse_step_markers(output, job.script)
        if not steps and exit_code != 0:
            # Submission itself was rejected; surface it as a zeroth step.
            steps = [StepResult(command=" ".join(cmd.argv), exit_code=exit_code, duration=0.0)]
        duration = time.monotonic() - started
        if steps:
            steps = [StepResult(s.command, s.exit_code, duration / len(steps)) for s in steps]
        return JobResult(
            status="success" if exit_code == 0 else "failed",
            step_results=steps,
            log=output,
        )


class KubernetesExecutor:
    kind = "kubernetes"
    per_step = False

    def __init__(self, settings: dict[str, str] | None = None, pod_runner=None):
        self.settings = settings or {}
        self.pod_runner = pod_runner or mock_pod_runner
        self.dry_run = (self.settings.get("dry_run", "") or "").lower() in ("1", "true", "yes")

    def run_job(self, job, workspace: Workspace) -> JobResult:
        started = time.monotonic()
        manifest = k8s_manifest(job, workspace)
        exit_code, output = k8s_execute(manifest, self.pod_runner, dry_run=self.dry_run)
        steps = parse_step_markers(output, job.script)
        duration = time.monotonic() - started
        if steps:
            steps = [StepResult(s.command, s.exit_code, duration / len(steps)) for s in steps]
        return JobResult(
            status="success" if exit_code == 0 else "failed",
            step_results=steps,
            log=output,
        )


def make_executor(kind: str, settings: dict[str, str] | None = None):
    if kind == "shell":
        return ShellExecutor(settings)
    if kind == "container":
        return ContainerExecutor(settings)
    if kind == "batch":
        return BatchExecutor(settings)
    if kind == "kubernetes":
        return KubernetesExecutor(settings)
    raise ExecutorConfigError(f"unknown executor kind {kind!r}")
