import hashlib
import threading
from datetime import datetime, timedelta, timezone

import pytest

from scipipe.coordinator.core import (
    AuthenticationError,
    BadRequest,
    Coordinator,
    DepthExceeded,
    NotFound,
    PathTraversal,
    PayloadTooLarge,
    StaleLease,
    ValidationFailed,
)
from scipipe.scheduler import IllegalTransition, JobStatus

REPO = "file:///tmp/repo"
COMMIT = "c0ffee"


def submit(coordinator, text):
    return coordinator.submit_pipeline(REPO, COMMIT, text)


def runner_token(coordinator, tags, kind="shell", run_untagged=False, name="r"):
    _, token = coordinator.register_runner(name, set(tags), kind, run_untagged)
    return token


class TestSubmit:
    def test_first_stage_pending(self, coordinator, basic_text):
        pid = submit(coordinator, basic_text)
        view = coordinator.get_pipeline(pid)
        assert view["jobs"]["job1"]["status"] == "pending"
        assert view["jobs"]["job2"]["status"] == "created"

    def test_decentralized_start(self, coordinator, decentralized_text):
        pid = submit(coordinator, decentralized_text)
        view = coordinator.get_pipeline(pid)
        assert view["jobs"]["job0"]["status"] == "pending"
        assert view["jobs"]["job1"]["status"] == "created"
        assert view["jobs"]["job2"]["status"] == "created"

    def test_invalid_definition_rejected(self, coordinator, basic_text):
        broken = basic_text.replace("stages:\n  - stage1\n  - stage2\n", "stages: [stage1]\n")
        with pytest.raises(ValidationFailed):
            submit(coordinator, broken)

    def test_unknown_pipeline(self, coordinator):
        with pytest.raises(NotFound):
            coordinator.get_pipeline("pl-nope")


class TestRegister:
    def test_token_issued(self, coordinator):
        runner_id, token = coordinator.register_runner("hpc", {"slurm-cluster"}, "batch", False)
        assert runner_id.startswith("rn-")
        assert token

    def test_untagged_runner_allowed(self, coordinator):
        _, token = coordinator.register_runner("bench", set(), "shell", True)
        assert token

    def test_duplicate_names_get_distinct_ids(self, coordinator):
        a, _ = coordinator.register_runner("x", set(), "shell", True)
        b, _ = coordinator.register_runner("x", set(), "shell", True)
        assert a != b

    def test_empty_tag_rejected(self, coordinator):
        with pytest.raises(BadRequest):
            coordinator.register_runner("x", {""}, "shell", False)


class TestPoll:
    def test_tag_match_leases_job(self, coordinator, centralized_text):
        submit(coordinator, centralized_text)
        token = runner_token(coordinator, ["slurm-cluster"], "batch")
        lease = coordinator.poll_job(token)
        assert lease is not None
        assert lease.job.name == "job1"
        assert set(lease.job.tags) <= {"slurm-cluster"}

    def test_tag_mismatch_no_job(self, coordinator, decentralized_text):
        submit(coordinator, decentralized_text)
        token = runner_token(coordinator, ["docker-cluster"])
        assert coordinator.poll_job(token) is None

    def test_untagged_job_needs_untagged_runner(self, coordinator):
        submit(coordinator, "stages: [s]\nj:\n  stage: s\n  script: [true]\n")
        tagged = runner_token(coordinator, ["anything"], name="tagged")
        assert coordinator.poll_job(tagged) is None
        untagged = runner_token(coordinator, [], run_untagged=True, name="untagged")
        lease = coordinator.poll_job(untagged)
        assert lease is not None and lease.job.name == "j"

    def test_invalid_token(self, coordinator):
        with pytest.raises(AuthenticationError):
            coordinator.poll_job("not-a-token")

    def test_fifo_across_pipelines(self, coordinator):
        text = "stages: [s]\nj:\n  stage: s\n  script: [true]\n"
        first = submit(coordinator, text)
        second = submit(coordinator, text)
        token = runner_token(coordinator, [], run_untagged=True)
        assert coordinator.poll_job(token).pipeline_id == first
        assert coordinator.poll_job(token).pipeline_id == second

    def test_single_claim_under_contention(self, coordinator, basic_text):
        tokens = [
            runner_token(coordinator, ["docker-cluster"], name=f"r{i}") for i in range(2)
        ]
        for _ in range(50):
            pid = submit(coordinator, basic_text)
            results = [None, None]

            def poll(index):
                results[index] = coordinator.poll_job(tokens[index])

            threads = [threading.Thread(target=poll, args=(i,)) for i in range(2)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            claimed = [r for r in results if r is not None and r.pipeline_id == pid]
            assert len(claimed) == 1
            # drain: finish the pipeline so it stops matching
            coordinator.update_job(claimed[0].lease_id, JobStatus.FAILED)


class TestUpdate:
    def _lease(self, coordinator, text, tags):
        submit(coordinator, text)
        token = runner_token(coordinator, tags)
        return coordinator.poll_job(token), token

    def test_success_releases_next_stage(self, coordinator, basic_text):
        lease, token = self._lease(coordinator, basic_text, ["docker-cluster"])
        coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
        view = coordinator.get_pipeline(lease.pipeline_id)
        assert view["jobs"]["job2"]["status"] == "pending"

    def test_failure_skips_and_fails(self, coordinator, basic_text):
        lease, _ = self._lease(coordinator, basic_text, ["docker-cluster"])
        coordinator.update_job(lease.lease_id, JobStatus.FAILED, b"boom\n")
        view = coordinator.get_pipeline(lease.pipeline_id)
        assert view["jobs"]["job2"]["status"] == "skipped"
        assert view["status"] == "failed"
        assert coordinator.get_logs(lease.pipeline_id, "job1") == b"boom\n"

    def test_consumed_lease_is_stale(self, coordinator, basic_text):
        lease, _ = self._lease(coordinator, basic_text, ["docker-cluster"])
        coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
        with pytest.raises(StaleLease):
            coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)

    def test_log_chunks_append_in_order(self, coordinator, basic_text):
        lease, _ = self._lease(coordinator, basic_text, ["docker-cluster"])
        coordinator.update_job(lease.lease_id, JobStatus.RUNNING, b"one ")
        coordinator.update_job(lease.lease_id, JobStatus.RUNNING, b"two")
        coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
        assert coordinator.get_logs(lease.pipeline_id, "job1") == b"one two"


class TestArtifacts:
    def _lease(self, coordinator, basic_text):
        submit(coordinator, basic_text)
        token = runner_token(coordinator, ["docker-cluster"])
        return coordinator.poll_job(token)

    def test_content_hash_id(self, coordinator, basic_text):
        lease = self._lease(coordinator, basic_text)
        payload = b"results"
        artifact_id = coordinator.upload_artifact(lease.lease_id, "out/results.h5", payload)
        assert artifact_id == hashlib.sha256(payload).hexdigest()
        assert coordinator.get_artifact(artifact_id) == payload

    def test_traversal_rejected(self, coordinator, basic_text):
        lease = self._lease(coordinator, basic_text)
        with pytest.raises(PathTraversal):
            coordinator.upload_artifact(lease.lease_id, "../etc/passwd", b"x")
        with pytest.raises(PathTraversal):
            coordinator.upload_artifact(lease.lease_id, "/etc/passwd", b"x")

    def test_idempotent_upload(self, coordinator, basic_text):
        lease = self._lease(coordinator, basic_text)
        a = coordinator.upload_artifact(lease.lease_id, "out.csv", b"same")
        b = coordinator.upload_artifact(lease.lease_id, "out.csv", b"same")
        assert a == b
        view = coordinator.get_pipeline(lease.pipeline_id)
        assert len(view["artifacts"]) == 1

    def test_size_cap(self, basic_text):
        coordinator = Coordinator(max_artifact_bytes=10)
        submit(coordinator, basic_text)
        token = runner_token(coordinator, ["docker-cluster"])
        lease = coordinator.poll_job(token)
        with pytest.raises(PayloadTooLarge):
            coordinator.upload_artifact(lease.lease_id, "big.bin", b"x" * 11)

    def test_manifest_enforced(self, coordinator):
        text = (
            "stages: [s]\n"
            "j:\n  stage: s\n  script: [true]\n  artifacts: [out.csv]\n"
        )
        submit(coordinator, text)
        token = runner_token(coordinator, [], run_untagged=True)
        lease = coordinator.poll_job(token)
        assert lease.artifact_manifest == ["out.csv"]
        coordinator.upload_artifact(lease.lease_id, "out.csv", b"ok")
        with pytest.raises(BadRequest):
            coordinator.upload_artifact(lease.lease_id, "other.csv", b"no")


class TestChildPipelines:
    def _running_lease(self, coordinator, basic_text):
        submit(coordinator, basic_text)
        token = runner_token(coordinator, ["docker-cluster"])
        return coordinator.poll_job(token)

    def test_trigger_child(self, coordinator, basic_text):
        lease = self._running_lease(coordinator, basic_text)
        child_def = "stages: [s]\ngen:\n  stage: s\n  script: [true]\n"
        artifact_id = coordinator.upload_artifact(lease.lease_id, "child.yml", child_def.encode())
        child_id = coordinator.trigger_child_pipeline(lease.lease_id, artifact_id)
        child = coordinator.get_pipeline(child_id)
        assert child["parent"] == [lease.pipeline_id, "job1"]
        assert child["jobs"]["gen"]["status"] == "pending"
        parent = coordinator.get_pipeline(lease.pipeline_id)
        assert child_id in parent["children"]
        assert child["repo"] == parent["repo"]

    def test_parent_not_coupled_to_child(self, coordinator, basic_text):
        lease = self._running_lease(coordinator, basic_text)
        child_def = "stages: [s]\ngen:\n  stage: s\n  script: [true]\n"
        artifact_id = coordinator.upload_artifact(lease.lease_id, "c.yml", child_def.encode())
        coordinator.trigger_child_pipeline(lease.lease_id, artifact_id)
        coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
        parent = coordinator.get_pipeline(lease.pipeline_id)
        assert parent["jobs"]["job1"]["status"] == "success"

    def test_invalid_child_rejected(self, coordinator, basic_text):
        lease = self._running_lease(coordinator, basic_text)
        artifact_id = coordinator.upload_artifact(lease.lease_id, "bad.yml", b"stages: nope\n")
        with pytest.raises(ValidationFailed):
            coordinator.trigger_child_pipeline(lease.lease_id, artifact_id)

    def test_depth_limit(self, basic_text):
        coordinator = Coordinator(max_child_depth=2)
        child_def = (
            "default:\n  tags: [docker-cluster]\n"
            "stages: [s]\ngen:\n  stage: s\n  script: [true]\n"
        )
        token = runner_token(coordinator, ["docker-cluster"])
        submit(coordinator, basic_text)
        lease = coordinator.poll_job(token)
        for _ in range(2):
            artifact_id = coordinator.upload_artifact(lease.lease_id, "c.yml", child_def.encode())
            coordinator.trigger_child_pipeline(lease.lease_id, artifact_id)
            coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
            lease = coordinator.poll_job(token)
            while lease is not None and lease.job.name != "gen":
                coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
                lease = coordinator.poll_job(token)
            assert lease is not None
        artifact_id = coordinator.upload_artifact(lease.lease_id, "c.yml", child_def.encode())
        with pytest.raises(DepthExceeded):
            coordinator.trigger_child_pipeline(lease.lease_id, artifact_id)


class TestLeaseExpiry:
    def test_expired_lease_requeues_job(self, basic_text):
        now = [datetime.now(timezone.utc)]
        coordinator = Coordinator(lease_ttl=30.0, clock=lambda: now[0])
        submit(coordinator, basic_text)
        token = runner_token(coordinator, ["docker-cluster"])
        lease = coordinator.poll_job(token)
        assert lease is not None

        now[0] += timedelta(seconds=60)
        coordinator.expire_leases()
        view = coordinator.get_pipeline(lease.pipeline_id)
        assert view["jobs"]["job1"]["status"] == "pending"
        with pytest.raises(StaleLease):
            coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)

        release = coordinator.poll_job(token)
        assert release is not None and release.job.name == "job1"
        assert release.lease_id != lease.lease_id


class TestReplay:
    def test_mid_run_state_survives_restart(self, tmp_path, basic_text):
        log_path = str(tmp_path / "events.jsonl")
        first = Coordinator(log_path=log_path)
        pid = submit(first, basic_text)
        token = runner_token(first, ["docker-cluster"])
        lease = first.poll_job(token)
        first.update_job(lease.lease_id, JobStatus.RUNNING, b"working\n")
        artifact_id = first.upload_artifact(lease.lease_id, "out.txt", b"partial")
        first.update_job(lease.lease_id, JobStatus.SUCCESS)
        lease2 = first.poll_job(token)
        before = first.get_pipeline(pid)
        first.close()

        second = Coordinator(log_path=log_path)
        after = second.get_pipeline(pid)
        assert after == before
        assert second.get_artifact(artifact_id) == b"partial"
        assert second.get_logs(pid, "job1") == b"working\n"
        # the in-flight lease survives and can complete
        second.update_job(lease2.lease_id, JobStatus.SUCCESS)
        assert second.get_pipeline(pid)["status"] == "success"
        second.close()

    def test_runner_token_survives_restart(self, tmp_path, basic_text):
        log_path = str(tmp_path / "events.jsonl")
        first = Coordinator(log_path=log_path)
        token = runner_token(first, ["docker-cluster"])
        first.close()
        second = Coordinator(log_path=log_path)
        submit(second, basic_text)
        assert second.poll_job(token) is not None
        second.close()


def test_illegal_transition_surfaces(coordinator, basic_text):
    submit(coordinator, basic_text)
    token = runner_token(coordinator, ["docker-cluster"])
    lease = coordinator.poll_job(token)
    coordinator.update_job(lease.lease_id, JobStatus.SUCCESS)
    # a second lease for job2, then an illegal target
    lease2 = coordinator.poll_job(token)
    with pytest.raises(IllegalTransition):
        coordinator.update_job(lease2.lease_id, JobStatus.SKIPPED)
