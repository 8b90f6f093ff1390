"""HTTP wire protocol for the coordinator.

JSON request/response bodies; runner endpoints authenticate with a bearer
token issued at registration. Poll returns 204 with a Retry-After hint when
no job matches.
"""

from __future__ import annotations

from base64 import b64decode

from fastapi import FastAPI, Header, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..scheduler import IllegalTransition, JobStatus
from .core import (
    AuthenticationError,
    BadRequest,
    Coordinator,
    CoordinatorError,
    DepthExceeded,
    NotFound,
    PathTraversal,
    PayloadTooLarge,
    StaleLease,
    ValidationFailed,
)

_STATUS_CODES = {
    AuthenticationError: 401,
    NotFound: 404,
    StaleLease: 409,
    DepthExceeded: 409,
    PathTraversal: 400,
    BadRequest: 400,
    PayloadTooLarge: 413,
}


class SubmitBody(BaseModel):
    repo_url: str
    commit: str
    definition: str


class RegisterBody(BaseModel):
    name: str
    tags: list[str] = Field(default_factory=list)
    executor_kind: str
    run_untagged: bool = False


class StatusBody(BaseModel):
    status: str
    log_b64: str | None = None


class ArtifactBody(BaseModel):
    path: str
    payload_b64: str


class TriggerBody(BaseModel):
    artifact_id: str


def _bearer_token(authorization: str | None) -> str:
    if not authorization or not authorization.startswith("Bearer "):
        raise AuthenticationError("missing bearer token")
    return authorization.removeprefix("Bearer ")


def create_app(coordinator: Coordinator) -> FastAPI:
    app = FastAPI(title="scipipe coordinator")
    app.state.coordinator = coordinator

    @app.exception_handler(CoordinatorError)
    async def _coordinator_error(_request: Request, exc: CoordinatorError):
        body = {"error": exc.code, "message": str(exc)}
        if isinstance(exc, ValidationFailed):
            return JSONResponse(status_code=422, content={**body, "report": exc.report.to_dict()})
        return JSONResponse(status_code=_STATUS_CODES.get(type(exc), 500), content=body)

    @app.exception_handler(IllegalTransition)
    async def _illegal_transition(_request: Request, exc: IllegalTransition):
        return JSONResponse(
            status_code=409, content={"error": "ILLEGAL_TRANSITION", "message": str(exc)}
        )

    @app.post("/pipelines", status_code=201)
    def submit_pipeline(body: SubmitBody):
        pipeline_id = coordinator.submit_pipeline(body.repo_url, body.commit, body.definition)
        return {"pipeline_id": pipeline_id}

    @app.post("/runners", status_code=201)
    def register_runner(body: RegisterBody):
        runner_id, token = coordinator.register_runner(
            body.name, set(body.tags), body.executor_kind, body.run_untagged
        )
        return {"runner_id": runner_id, "token": token}

    @app.post("/runners/poll")
    def poll_job(authorization: str | None = Header(default=None)):
        lease = coordinator.poll_job(_bearer_token(authorization))
        if lease is None:
            return Response(
                status_code=204, headers={"Retry-After": str(coordinator.retry_after)}
            )
        return lease.to_dict()

    @app.post("/leases/{lease_id}/status")
    def update_status(
        lease_id: str, body: StatusBody, authorization: str | None = Header(default=None)
    ):
        _bearer_token(authorization)
        try:
            status = JobStatus(body.status)
        except ValueError:
            raise BadRequest(f"unknown job status {body.status!r}")
        log_chunk = b64decode(body.log_b64) if body.log_b64 else None
        coordinator.update_job(lease_id, status, log_chunk)
        return {"ok": True}

    @app.post("/leases/{lease_id}/artifacts", status_code=201)
    def upload_artifact(
        lease_id: str, body: ArtifactBody, authorization: str | None = Header(default=None)
    ):
        _bearer_token(authorization)
        artifact_id = coordinator.upload_artifact(lease_id, body.path, b64decode(body.payload_b64))
        return {"artifact_id": artifact_id}

    @app.post("/leases/{lease_id}/trigger", status_code=201)
    def trigger_child(
        lease_id: str, body: TriggerBody, authorization: str | None = Header(default=None)
    ):
        _bearer_token(authorization)
        pipeline_id = coordinator.trigger_child_pipeline(lease_id, body.artifact_id)
        return {"pipeline_id": pipeline_id}

    @app.get("/pipelines/{pipeline_id}")
    def get_pipeline(pipeline_id: str):
        return coordinator.get_pipeline(pipeline_id)

    @app.get("/pipelines/{pipeline_id}/logs/{job}")
    def get_logs(pipeline_id: str, job: str):
        return Response(
            content=coordinator.get_logs(pipeline_id, job),
            media_type="application/octet-stream",
        )

    @app.get("/artifacts/{artifact_id}")
    def get_artifact(artifact_id: str):
        return Response(
            content=coordinator.get_artifact(artifact_id),
            media_type="application/octet-stream",
            headers={"X-Artifact-Id": artifact_id},
        )

    return app
