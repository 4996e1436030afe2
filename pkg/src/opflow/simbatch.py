"""A file-backed batch system simulator (the dispatcher's "cluster").

Jobs are directories under ``<work_root>/jobs/<job_id>/`` holding ``script``,
``job.json`` (command, resources, submit order), ``state`` (one of Queued,
Running, Completed, Failed, TimedOut), ``rc``, and ``log``.  Submission and
polling are plain file operations, so any process can act as a client; the
daemon (:class:`SimBatchSystem`) runs worker threads that claim Queued jobs
in FIFO submit order and enforce walltime by killing the process group.
"""

from __future__ import annotations

import json
import os
import shutil
import signal
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .errors import SubmissionFailed, UnknownJobId
from .fsutil import atomic_write_text, read_value_text


@dataclass(frozen=True)
class ResourceSpec:
    """What a job asks of the batch system."""

    cpu: int = 1
    memory_mb: int = 1024
    queue: str = "main"
    walltime_seconds: int = 3600

    def __post_init__(self) -> None:
        if self.cpu < 1 or self.memory_mb < 1 or self.walltime_seconds < 1:
            raise ValueError("resources must be positive")


STATE_QUEUED = "Queued"
STATE_RUNNING = "Running"
STATE_COMPLETED = "Completed"
STATE_FAILED = "Failed"
STATE_TIMED_OUT = "TimedOut"

TERMINAL_STATES = frozenset({STATE_COMPLETED, STATE_FAILED, STATE_TIMED_OUT})
ALL_STATES = TERMINAL_STATES | {STATE_QUEUED, STATE_RUNNING}


@dataclass(frozen=True)
class BatchJob:
    job_id: str
    state: str


def _jobs_root(work_root: str | Path) -> Path:
    return Path(work_root) / "jobs"


def sim_batch_submit(
    work_root: str | Path,
    script_path: str | Path,
    resources: ResourceSpec,
    command: tuple[str, ...] = ("/bin/sh",),
) -> BatchJob:
    """Enqueue a job; returns it in state Queued."""
    script = Path(script_path)
    if not script.is_file():
        raise SubmissionFailed(f"no script at {script}")
    job_id = f"{time.time_ns():020d}-{uuid.uuid4().hex[:6]}"
    job_dir = _jobs_root(work_root) / job_id
    job_dir.mkdir(parents=True)
    shutil.copyfile(script, job_dir / "script")
    atomic_write_text(
        job_dir / "job.json",
        json.dumps(
            {
                "job_id": job_id,
                "command": list(command),
                "queue": resources.queue,
                "cpu": resources.cpu,
                "memory_mb": resources.memory_mb,
                "walltime_seconds": resources.walltime_seconds,
                "submit_ns": time.time_ns(),
            },
            indent=1,
            sort_keys=True,
        ),
    )
    atomic_write_text(job_dir / "state", STATE_QUEUED)
    return BatchJob(job_id=job_id, state=STATE_QUEUED)


def sim_batch_poll(work_root: str | Path, job_id: str) -> str:
    """Current state word of a job; raises UnknownJobId."""
    state_path = _jobs_root(work_root) / job_id / "state"
    if not state_path.is_file():
        raise UnknownJobId(f"no job {job_id!r}")
    return read_value_text(state_path)


def read_job_rc(work_root: str | Path, job_id: str) -> int | None:
    rc_path = _jobs_root(work_root) / job_id / "rc"
    if not rc_path.is_file():
        return None
    return int(read_value_text(rc_path))


class SimBatchSystem:
    """The daemon: N workers draining the queue FIFO with walltime enforcement."""

    def __init__(
        self,
        work_root: str | Path,
        workers: int = 2,
        scan_interval: float = 0.02,
    ) -> None:
        self.work_root = Path(work_root)
        self.workers = workers
        self.scan_interval = scan_interval
        self._claim_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        _jobs_root(self.work_root).mkdir(parents=True, exist_ok=True)

    # -- lifecycle

    def start(self) -> "SimBatchSystem":
        if self._threads:
            return self
        self._stop.clear()
        for index in range(self.workers):
            thread = threading.Thread(
                target=self._worker_loop, name=f"simbatch-worker-{index}", daemon=True
            )
            thread.start()
            self._threads.append(thread)
        return self

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=30)
        self._threads.clear()

    def __enter__(self) -> "SimBatchSystem":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    # -- workers

    def _claim_next(self) -> Path | None:
        with self._claim_lock:
            queued: list[tuple[int, str, Path]] = []
            for job_dir in _jobs_root(self.work_root).iterdir():
                state_path = job_dir / "state"
                meta_path = job_dir / "job.json"
                if not state_path.is_file() or not meta_path.is_file():
                    continue
                if read_value_text(state_path) != STATE_QUEUED:
                    continue
                try:
                    submit_ns = json.loads(meta_path.read_text("utf-8"))["submit_ns"]
                except (ValueError, KeyError):
                    continue
                queued.append((submit_ns, job_dir.name, job_dir))
            if not queued:
                return None
            queued.sort()
            job_dir = queued[0][2]
            atomic_write_text(job_dir / "state", STATE_RUNNING)
            return job_dir

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            job_dir = self._claim_next()
            if job_dir is None:
                self._stop.wait(self.scan_interval)
                continue
            self._run_job(job_dir)

    def _run_job(self, job_dir: Path) -> None:
        meta = json.loads((job_dir / "job.json").read_text("utf-8"))
        command = list(meta["command"]) + [str(job_dir / "script")]
        workdir = job_dir / "workdir"
        workdir.mkdir(exist_ok=True)
        walltime = meta.get("walltime_seconds")
        with (job_dir / "log").open("wb") as log:
            try:
                process = subprocess.Popen(
                    command,
                    cwd=workdir,
                    stdout=log,
                    stderr=subprocess.STDOUT,
                    start_new_session=True,
                )
            except OSError as exc:
                log.write(f"spawn failed: {exc}\n".encode())
                atomic_write_text(job_dir / "rc", "127")
                atomic_write_text(job_dir / "state", STATE_FAILED)
                return
            try:
                rc = process.wait(timeout=walltime)
            except subprocess.TimeoutExpired:
                kill_process_group(process)
                process.wait()
                atomic_write_text(job_dir / "state", STATE_TIMED_OUT)
                return
        atomic_write_text(job_dir / "rc", str(rc))
        atomic_write_text(
            job_dir / "state", STATE_COMPLETED if rc == 0 else STATE_FAILED
        )


def kill_process_group(process: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(process.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        process.kill()
