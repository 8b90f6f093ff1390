"""HTTP client for the coordinator wire protocol."""

from __future__ import annotations

from base64 import b64encode

import requests

from ..coordinator.core import JobLease


class TransportError(Exception):
    """Coordinator unreachable or the connection failed mid-request."""


class ApiError(Exception):
    def __init__(self, status_code: int, code: str, message: str, report: dict | None = None):
        self.status_code = status_code
        self.code = code
        self.report = report
        super().__init__(f"{code}: {message}")


class CoordinatorClient:
    def __init__(self, base_url: str, token: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        return {"Authorization": f"Bearer {self.token}"} if self.token else {}

    def _request(self, method: str, path: str, json_body: dict | None = None) -> requests.Response:
        try:
            response = self._session.request(
                method,
                f"{self.base_url}{path}",
                json=json_body,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = {}
            raise ApiError(
                response.status_code,
                body.get("error", "HTTP_ERROR"),
                body.get("message", response.text[:200]),
                body.get("report"),
            )
        return response

    def submit_pipeline(self, repo_url: str, commit: str, definition: str) -> str:
        response = self._request(
            "POST",
            "/pipelines",
            {"repo_url": repo_url, "commit": commit, "definition": definition},
        )
        return response.json()["pipeline_id"]

    def register_runner(
        self, name: str, tags: list[str], executor_kind: str, run_untagged: bool = False
    ) -> tuple[str, str]:
        response = self._request(
            "POST",
            "/runners",
            {
                "name": name,
                "tags": tags,
                "executor_kind": executor_kind,
                "run_untagged": run_untagged,
            },
        )
        body = response.json()
        return body["runner_id"], body["token"]

    def poll(self) -> JobLease | None:
        response = self._request("POST", "/runners/poll")
        if response.status_code == 204:
            return None
        return JobLease.from_dict(response.json())

    def update_status(self, lease_id: str, status: str, log: bytes | None = None) -> None:
        body: dict = {"status": status}
        if log:
            body["log_b64"] = b64encode(log).decode("ascii")
        self._request("POST", f"/leases/{lease_id}/status", body)

    def upload_artifact(self, lease_id: str, path: str, payload: bytes) -> str:
        response = self._request(
            "POST",
            f"/leases/{lease_id}/artifacts",
            {"path": path, "payload_b64": b64encode(payload).decode("ascii")},
        )
        return response.json()["artifact_id"]

    def trigger_child(self, lease_id: str, artifact_id: str) -> str:
        response = self._request(
            "POST", f"/leases/{lease_id}/trigger", {"artifact_id": artifact_id}
        )
        return response.json()["pipeline_id"]

    def get_pipeline(self, pipeline_id: str) -> dict:
        return self._request("GET", f"/pipelines/{pipeline_id}").json()

    def get_logs(self, pipeline_id: str, job: str) -> bytes:
        return self._request("GET", f"/pipelines/{pipeline_id}/logs/{job}").content

    def get_artifact(self, artifact_id: str) -> bytes:
        return self._request("GET", f"/artifacts/{artifact_id}").content
