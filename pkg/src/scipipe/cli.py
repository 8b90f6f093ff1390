"""Command line entry points.

Exit code contract (stable across subcommands):
  0  success
  1  domain failure (validation errors, failed pipeline, rejected submit)
  2  input error (unreadable file, unknown id, bad flags)
  3  transport error (coordinator unreachable)
"""

from __future__ import annotations

import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import click
import yaml

from .model import (
    PipelineSchemaError,
    PipelineSyntaxError,
    parse_pipeline,
    validate_pipeline,
)
from .runner.client import ApiError, CoordinatorClient, TransportError

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_INPUT = 2
EXIT_TRANSPORT = 3

WATCH_INTERVAL = 2.0


@click.group()
def main():
    """scipipe: decentralized scientific pipeline engine."""


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


# -- server -----------------------------------------------------------------


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8400, show_default=True)
@click.option(
    "--state-dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Directory for the append-only event log; omit for in-memory only.",
)
@click.option("--lease-ttl", default=600.0, show_default=True, help="Lease expiry in seconds.")
@click.option("--retry-after", default=1.0, show_default=True, help="Poll retry hint in seconds.")
def server(host, port, state_dir, lease_ttl, retry_after):
    """Start the coordinator service."""
    import uvicorn

    from .coordinator import Coordinator, create_app

    logging.basicConfig(level=logging.INFO)
    log_path = None
    if state_dir:
        log_path = str(Path(state_dir) / "events.jsonl")
    coordinator = Coordinator(log_path=log_path, lease_ttl=lease_ttl, retry_after=retry_after)
    uvicorn.run(create_app(coordinator), host=host, port=port)


# -- runner -----------------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read config file: {exc}")
    if not isinstance(data, dict):
        _fail(EXIT_INPUT, "config file must be a mapping")
    return data


@main.command()
@click.option("--coordinator", envvar="RUNNER_COORDINATOR", default=None, help="Coordinator URL.")
@click.option("--token", envvar="RUNNER_TOKEN", default=None, help="Runner token.")
@click.option(
    "--executor",
    envvar="RUNNER_EXECUTOR",
    type=click.Choice(["shell", "container", "batch", "kubernetes"]),
    default=None,
)
@click.option("--concurrency", envvar="RUNNER_CONCURRENCY", type=int, default=None)
@click.option("--workspace", envvar="RUNNER_WORKSPACE", default=None)
@click.option("--poll-interval", envvar="RUNNER_POLL_INTERVAL", type=float, default=None)
@click.option(
    "--executor-setting",
    "executor_settings",
    multiple=True,
    metavar="K=V",
    help="Executor-specific setting, repeatable.",
)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.pass_context
def runner(ctx, coordinator, token, executor, concurrency, workspace, poll_interval,
           executor_settings, config_path):
    """Start a runner agent (flags win over config file, file wins over env)."""
    from click.core import ParameterSource

    from .runner import RunnerAgent, RunnerConfig

    file_values = _load_config_file(config_path)

    def pick(name: str, flag_value, default):
        if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE:
            return flag_value
        if name in file_values:
            return file_values[name]
        return flag_value if flag_value is not None else default

    url = pick("coordinator", coordinator, None)
    tok = pick("token", token, None)
    if not url or not tok:
        _fail(EXIT_INPUT, "runner requires --coordinator and --token")

    settings = dict(file_values.get("executor_settings", {}))
    for item in executor_settings:
        if "=" not in item:
            _fail(EXIT_INPUT, f"bad --executor-setting {item!r}, expected K=V")
        key, _, value = item.partition("=")
        settings[key] = value

    config = RunnerConfig(
        coordinator_url=url,
        token=tok,
        executor_kind=pick("executor", executor, "shell"),
        concurrency=int(pick("concurrency", concurrency, 1)),
        workspace_root=pick("workspace", workspace, "./workspaces"),
        poll_interval=float(pick("poll_interval", poll_interval, 1.0)),
        executor_settings=settings,
    )
    logging.basicConfig(level=logging.INFO)
    agent = RunnerAgent(config)
    try:
        agent.run_loop()
    except KeyboardInterrupt:
        agent.stop()
    sys.exit(EXIT_OK)


@main.command("register-runner")
@click.option("--coordinator", required=True)
@click.option("--name", required=True)
@click.option("--tag", "tags", multiple=True)
@click.option(
    "--executor",
    type=click.Choice(["shell", "container", "batch", "kubernetes"]),
    default="shell",
    show_default=True,
)
@click.option("--run-untagged", is_flag=True)
def register_runner(coordinator, name, tags, executor, run_untagged):
    """Register a runner and print its id and token (token shown once)."""
    client = CoordinatorClient(coordinator)
    try:
        runner_id, token = client.register_runner(name, list(tags), executor, run_untagged)
    except TransportError as exc:
        _fail(EXIT_TRANSPORT, f"coordinator unreachable: {exc}")
    except ApiError as exc:
        _fail(EXIT_DOMAIN, str(exc))
    click.echo(f"runner_id: {runner_id}")
    click.echo(f"token: {token}")


# -- researcher commands ----------------------------------------------------


def _print_report(report: dict) -> None:
    for issue in report.get("errors", []):
        loc = f" [{issue['location']}]" if issue.get("location") else ""
        click.echo(f"error {issue['code']}: {issue['message']}{loc}")
    for issue in report.get("warnings", []):
        loc = f" [{issue['location']}]" if issue.get("location") else ""
        click.echo(f"warning {issue['code']}: {issue['message']}{loc}")


@main.command()
@click.argument("path", type=click.Path())
def validate(path):
    """Validate a pipeline definition offline."""
    try:
        source = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read {path}: {exc}")
    try:
        definition = parse_pipeline(source)
    except (PipelineSyntaxError, PipelineSchemaError) as exc:
        click.echo(f"error PARSE_ERROR: {exc}")
        sys.exit(EXIT_DOMAIN)
    report = validate_pipeline(definition)
    _print_report(report.to_dict())
    if not report.ok:
        sys.exit(EXIT_DOMAIN)
    click.echo(f"ok: {len(definition.jobs)} job(s), {len(definition.stages)} stage(s)")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--coordinator", required=True)
@click.option("--repo", "repo_url", required=True)
@click.option("--commit", required=True)
@click.argument("path", type=click.Path())
def submit(coordinator, repo_url, commit, path):
    """Submit a pipeline definition; prints the pipeline id."""
    try:
        source = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read {path}: {exc}")
    client = CoordinatorClient(coordinator)
    try:
        pipeline_id = client.submit_pipeline(repo_url, commit, source)
    except TransportError as exc:
        _fail(EXIT_TRANSPORT, f"coordinator unreachable: {exc}")
    except ApiError as exc:
        if exc.report:
            _print_report(exc.report)
        else:
            click.echo(str(exc), err=True)
        sys.exit(EXIT_DOMAIN)
    click.echo(pipeline_id)
    sys.exit(EXIT_OK)


def _duration(job: dict) -> str:
    started, finished = job.get("started"), job.get("finished")
    if not started or not finished:
        return "-"
    delta = datetime.fromisoformat(finished) - datetime.fromisoformat(started)
    return f"{delta.total_seconds():.1f}s"


def _render_status(view: dict) -> None:
    rows = [(name, j["stage"], j["status"], _duration(j)) for name, j in view["jobs"].items()]
    widths = [max(len(r[i]) for r in rows + [("job", "stage", "status", "duration")]) for i in range(4)]
    header = ("job", "stage", "status", "duration")
    click.echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        click.echo("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    click.echo(f"pipeline: {view['status']}")


@main.command()
@click.option("--coordinator", required=True)
@click.option("--watch", is_flag=True, help="Repoll until the pipeline is terminal.")
@click.option("--json", "as_json", is_flag=True, help="Emit the wire payload verbatim.")
@click.argument("pipeline_id")
def status(coordinator, watch, as_json, pipeline_id):
    """Show per-job statuses for one pipeline run."""
    client = CoordinatorClient(coordinator)
    while True:
        try:
            view = client.get_pipeline(pipeline_id)
        except TransportError as exc:
            _fail(EXIT_TRANSPORT, f"coordinator unreachable: {exc}")
        except ApiError as exc:
            _fail(EXIT_INPUT if exc.status_code == 404 else EXIT_DOMAIN, str(exc))
        if not watch or view["status"] in ("success", "failed"):
            break
        time.sleep(WATCH_INTERVAL)
    if as_json:
        click.echo(json.dumps(view, indent=2))
    else:
        _render_status(view)
    sys.exit(EXIT_OK if view["status"] == "success" else EXIT_DOMAIN)


@main.command()
@click.option("--coordinator", required=True)
@click.argument("pipeline_id")
@click.argument("job")
def logs(coordinator, pipeline_id, job):
    """Print the captured log of one job."""
    client = CoordinatorClient(coordinator)
    try:
        payload = client.get_logs(pipeline_id, job)
    except TransportError as exc:
        _fail(EXIT_TRANSPORT, f"coordinator unreachable: {exc}")
    except ApiError as exc:
        _fail(EXIT_INPUT if exc.status_code == 404 else EXIT_DOMAIN, str(exc))
    sys.stdout.buffer.write(payload)
    sys.exit(EXIT_OK)


@main.command()
@click.option("--coordinator", required=True)
@click.option("--json", "as_json", is_flag=True, help="Emit the wire payload verbatim.")
@click.option("--download", "artifact_id", default=None, help="Artifact id to download.")
@click.option("--output", type=click.Path(), default=None, help="Write download here.")
@click.argument("pipeline_id")
def artifacts(coordinator, as_json, artifact_id, output, pipeline_id):
    """List (or download) artifacts of one pipeline run."""
    client = CoordinatorClient(coordinator)
    try:
        view = client.get_pipeline(pipeline_id)
        if artifact_id:
            payload = client.get_artifact(artifact_id)
            if output:
                Path(output).write_bytes(payload)
                click.echo(f"wrote {len(payload)} bytes to {output}")
            else:
                sys.stdout.buffer.write(payload)
            sys.exit(EXIT_OK)
    except TransportError as exc:
        _fail(EXIT_TRANSPORT, f"coordinator unreachable: {exc}")
    except ApiError as exc:
        _fail(EXIT_INPUT if exc.status_code == 404 else EXIT_DOMAIN, str(exc))
    if as_json:
        click.echo(json.dumps(view["artifacts"], indent=2))
    else:
        for artifact in view["artifacts"]:
            click.echo(f"{artifact['artifact_id']}  {artifact['job']}  {artifact['path']}  {artifact['size']}B")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
