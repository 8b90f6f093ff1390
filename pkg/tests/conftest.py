import socket
import subprocess
import threading
import time
from pathlib import Path

import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from scipipe.coordinator import Coordinator, create_app
from scipipe.model import parse_pipeline

LISTINGS = Path(__file__).parent / "listings"


@pytest.fixture(scope="session")
def basic_text():
    return (LISTINGS / "basic.yml").read_text()


@pytest.fixture(scope="session")
def centralized_text():
    return (LISTINGS / "centralized.yml").read_text()


@pytest.fixture(scope="session")
def decentralized_text():
    return (LISTINGS / "decentralized.yml").read_text()


@pytest.fixture
def basic_def(basic_text):
    return parse_pipeline(basic_text)


@pytest.fixture
def centralized_def(centralized_text):
    return parse_pipeline(centralized_text)


@pytest.fixture
def decentralized_def(decentralized_text):
    return parse_pipeline(decentralized_text)


def _git(*args, cwd=None):
    subprocess.run(
        ["git", "-c", "user.email=test@example.org", "-c", "user.name=test", *args],
        cwd=cwd,
        check=True,
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


@pytest.fixture(scope="session")
def science_repo(tmp_path_factory):
    """Local git repository with stub versions of the listed scripts; each
    stub writes a marker file so tests can check workspace outputs."""
    repo = tmp_path_factory.mktemp("science-repo")
    (repo / "download-data.sh").write_text("#!/bin/sh\necho raw > data.txt\n")
    (repo / "analyze-data-step1.py").write_text("open('step1.txt', 'w').write('one\\n')\n")
    (repo / "analyze-data-step2.py").write_text("open('step2.txt', 'w').write('two\\n')\n")
    (repo / "upload-data.bat").write_text("echo uploaded > uploaded.txt\n")
    _git("init", "-q", str(repo))
    _git("add", "-A", cwd=repo)
    _git("commit", "-q", "-m", "initial", cwd=repo)
    head = subprocess.run(
        ["git", "rev-parse", "HEAD"], cwd=repo, check=True, capture_output=True, text=True
    ).stdout.strip()
    return {"url": str(repo), "commit": head}


@pytest.fixture(scope="session")
def stub_bin(tmp_path_factory):
    """Fake ``powershell`` so the instrument job's command runs on POSIX."""
    bin_dir = tmp_path_factory.mktemp("stub-bin")
    ps = bin_dir / "powershell"
    ps.write_text('#!/bin/sh\nexec sh "$@"\n')
    ps.chmod(0o755)
    return bin_dir


@pytest.fixture
def coordinator():
    return Coordinator(lease_ttl=60.0)


class LiveServer:
    def __init__(self, coordinator):
        import uvicorn

        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            self.port = sock.getsockname()[1]
        self.url = f"http://127.0.0.1:{self.port}"
        self.coordinator = coordinator
        config = uvicorn.Config(
            create_app(coordinator),
            host="127.0.0.1",
            port=self.port,
            log_level="warning",
        )
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    def start(self):
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("coordinator server did not start")
            time.sleep(0.02)
        return self

    def stop(self):
        self._server.should_exit = True
        self._thread.join(timeout=10)


@pytest.fixture
def live_server(coordinator):
    server = LiveServer(coordinator).start()
    yield server
    server.stop()


class DirectClient:
    """CoordinatorClient-compatible adapter calling the coordinator in
    process; lets agent tests skip HTTP."""

    def __init__(self, coordinator, token=None):
        self.coordinator = coordinator
        self.token = token

    def poll(self):
        return self.coordinator.poll_job(self.token)

    def update_status(self, lease_id, status, log=None):
        from scipipe.scheduler import JobStatus

        self.coordinator.update_job(lease_id, JobStatus(status), log)

    def upload_artifact(self, lease_id, path, payload):
        return self.coordinator.upload_artifact(lease_id, path, payload)

    def trigger_child(self, lease_id, artifact_id):
        return self.coordinator.trigger_child_pipeline(lease_id, artifact_id)

    def get_pipeline(self, pipeline_id):
        return self.coordinator.get_pipeline(pipeline_id)

    def get_logs(self, pipeline_id, job):
        return self.coordinator.get_logs(pipeline_id, job)

    def get_artifact(self, artifact_id):
        return self.coordinator.get_artifact(artifact_id)


@pytest.fixture
def direct_client(coordinator):
    def make(token):
        return DirectClient(coordinator, token)

    return make
