"""File-backed batch simulator tests: submission, states, FIFO, walltime."""

import json
import re
import time

import pytest

from opflow.errors import SubmissionFailed, UnknownJobId
from opflow.simbatch import (
    ResourceSpec,
    STATE_COMPLETED,
    STATE_FAILED,
    STATE_QUEUED,
    STATE_TIMED_OUT,
    TERMINAL_STATES,
    SimBatchSystem,
    read_job_rc,
    sim_batch_poll,
    sim_batch_submit,
)

JOB_ID_RE = re.compile(r"^\d{20}-[0-9a-f]{6}$")


def wait_terminal(work_root, job_id, timeout=15.0) -> str:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        state = sim_batch_poll(work_root, job_id)
        if state in TERMINAL_STATES:
            return state
        time.sleep(0.02)
    raise AssertionError(f"job {job_id} still {state} after {timeout}s")


def write_script(tmp_path, text, name="job.sh"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestResourceSpec:
    def test_defaults(self):
        spec = ResourceSpec()
        assert (spec.cpu, spec.memory_mb, spec.queue, spec.walltime_seconds) == (
            1, 1024, "main", 3600,
        )

    @pytest.mark.parametrize("kw", [
        {"cpu": 0}, {"memory_mb": 0}, {"walltime_seconds": 0}, {"cpu": -2},
    ])
    def test_rejects_non_positive(self, kw):
        with pytest.raises(ValueError):
            ResourceSpec(**kw)


class TestSubmission:
    def test_submit_creates_job_directory(self, tmp_path):
        script = write_script(tmp_path, "echo hi\n")
        job = sim_batch_submit(tmp_path / "cluster", script, ResourceSpec())
        assert JOB_ID_RE.match(job.job_id)
        assert job.state == STATE_QUEUED
        job_dir = tmp_path / "cluster" / "jobs" / job.job_id
        assert (job_dir / "script").read_text() == "echo hi\n"
        assert (job_dir / "state").read_text() == STATE_QUEUED
        meta = json.loads((job_dir / "job.json").read_text())
        assert meta["command"] == ["/bin/sh"]
        assert meta["walltime_seconds"] == 3600
        assert meta["job_id"] == job.job_id

    def test_missing_script(self, tmp_path):
        with pytest.raises(SubmissionFailed):
            sim_batch_submit(tmp_path / "cluster", tmp_path / "ghost.sh",
                             ResourceSpec())

    def test_poll_unknown_job(self, tmp_path):
        (tmp_path / "cluster" / "jobs").mkdir(parents=True)
        with pytest.raises(UnknownJobId):
            sim_batch_poll(tmp_path / "cluster", "nope")

    def test_rc_is_none_before_completion(self, tmp_path):
        script = write_script(tmp_path, "true\n")
        job = sim_batch_submit(tmp_path / "cluster", script, ResourceSpec())
        assert read_job_rc(tmp_path / "cluster", job.job_id) is None


class TestDaemon:
    def test_successful_job(self, tmp_path):
        cluster = tmp_path / "cluster"
        script = write_script(tmp_path, "echo out-line\necho err-line >&2\n")
        with SimBatchSystem(cluster):
            job = sim_batch_submit(cluster, script, ResourceSpec())
            state = wait_terminal(cluster, job.job_id)
        assert state == STATE_COMPLETED
        assert read_job_rc(cluster, job.job_id) == 0
        log = (cluster / "jobs" / job.job_id / "log").read_text()
        assert "out-line" in log and "err-line" in log  # merged streams

    def test_failed_job_keeps_exit_code(self, tmp_path):
        cluster = tmp_path / "cluster"
        script = write_script(tmp_path, "exit 3\n")
        with SimBatchSystem(cluster):
            job = sim_batch_submit(cluster, script, ResourceSpec())
            state = wait_terminal(cluster, job.job_id)
        assert state == STATE_FAILED
        assert read_job_rc(cluster, job.job_id) == 3

    def test_job_runs_in_its_own_workdir(self, tmp_path):
        cluster = tmp_path / "cluster"
        script = write_script(tmp_path, "echo data > produced.txt\n")
        with SimBatchSystem(cluster):
            job = sim_batch_submit(cluster, script, ResourceSpec())
            wait_terminal(cluster, job.job_id)
        produced = cluster / "jobs" / job.job_id / "workdir" / "produced.txt"
        assert produced.read_text() == "data\n"

    def test_walltime_enforcement(self, tmp_path):
        cluster = tmp_path / "cluster"
        script = write_script(tmp_path, "sleep 30\n")
        started = time.monotonic()
        with SimBatchSystem(cluster):
            job = sim_batch_submit(
                cluster, script, ResourceSpec(walltime_seconds=1)
            )
            state = wait_terminal(cluster, job.job_id)
        assert state == STATE_TIMED_OUT
        assert time.monotonic() - started < 10
        assert read_job_rc(cluster, job.job_id) is None

    def test_fifo_order_with_one_worker(self, tmp_path):
        cluster = tmp_path / "cluster"
        shared = tmp_path / "order.log"
        scripts = [
            write_script(tmp_path, f"echo {tag} >> {shared}\n", name=f"{tag}.sh")
            for tag in ("first", "second", "third")
        ]
        jobs = [sim_batch_submit(cluster, s, ResourceSpec()) for s in scripts]
        with SimBatchSystem(cluster, workers=1):
            for job in jobs:
                wait_terminal(cluster, job.job_id)
        assert shared.read_text().split() == ["first", "second", "third"]

    def test_start_and_stop_are_reentrant(self, tmp_path):
        system = SimBatchSystem(tmp_path / "cluster")
        assert system.start() is system
        system.start()  # second start is a no-op
        system.stop()
        system.stop()

    def test_spawn_failure_marks_failed(self, tmp_path):
        cluster = tmp_path / "cluster"
        script = write_script(tmp_path, "irrelevant\n")
        job = sim_batch_submit(cluster, script, ResourceSpec(),
                               command=("/no/such/interpreter",))
        with SimBatchSystem(cluster):
            state = wait_terminal(cluster, job.job_id)
        assert state == STATE_FAILED
        assert read_job_rc(cluster, job.job_id) == 127
        log = (cluster / "jobs" / job.job_id / "log").read_text()
        assert "spawn failed" in log
