"""Execution backends behind the render-based plugin contract.

An executor transforms a script template into the template that actually
runs; the engine applies ``executor.render(template)`` after substituting
placeholders and then always executes the result locally via
:func:`local_execute`.  The local executor renders to the identity.  The
dispatcher executor renders to a wrapper program that ships the step's
working directory through artifact storage, submits a dialect-headed job
script to a batch system (the file-backed simulator), polls until terminal,
and pulls the results back, so the step behaves as if it had run locally.

Scripts signal outcomes through exit codes: 0 success, 64 transient failure
(retryable), anything else fatal.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

from .errors import MissingOutputFile
from .fsutil import read_value_text
from .model import ScriptTemplate
from .simbatch import ResourceSpec
from . import simbatch

EXIT_SUCCESS = 0
EXIT_TRANSIENT = 64

BATCH_TYPES = ("sim", "slurm-dialect", "pbs-dialect")


@dataclass(frozen=True)
class MachineSpec:
    """Where dispatched jobs go."""

    batch_type: str  # sim | slurm-dialect | pbs-dialect
    work_root: Path

    def __post_init__(self) -> None:
        if self.batch_type not in BATCH_TYPES:
            raise ValueError(
                f"batch_type must be one of {BATCH_TYPES}, got {self.batch_type!r}"
            )


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one script execution attempt."""

    exit_code: int
    stdout_path: Path
    stderr_path: Path
    duration: float
    timed_out: bool = False
    # populated only on exit code 0
    output_parameters: dict[str, str] | None = None
    output_artifacts: dict[str, Path] | None = None

    @property
    def kind(self) -> str:
        """success | transient | fatal | timeout (see the exit-code convention)."""
        if self.timed_out:
            return "timeout"
        if self.exit_code == EXIT_SUCCESS:
            return "success"
        if self.exit_code == EXIT_TRANSIENT:
            return "transient"
        return "fatal"


class Executor:
    """Contract: a named, pure transform on script templates.

    ``render`` must preserve the template's input and output signatures and
    have no side effects; the engine may call it any number of times.
    """

    name = "executor"

    def render(self, template: ScriptTemplate) -> ScriptTemplate:
        raise NotImplementedError


class LocalExecutor(Executor):
    """Run scripts directly in the step's working directory."""

    name = "local"

    def render(self, template: ScriptTemplate) -> ScriptTemplate:
        return template


# ---------------------------------------------------------------------------
# Local execution


def local_execute(
    template: ScriptTemplate,
    workdir: str | Path,
    inputs: Mapping[str, object] | None = None,
    timeout: float | None = None,
    *,
    script_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> ExecResult:
    """Run ``template.command + [script]`` in ``workdir`` and collect outputs.

    The caller has already rendered placeholders and materialized input
    artifacts at their mount paths; ``inputs`` is recorded next to the script
    for inspection only.  stdout and stderr are merged into one log file.  On
    exit 0, output parameters are read from their value_from files (one
    trailing newline stripped) and output artifacts collected from their
    declared paths; a missing non-optional output raises MissingOutputFile.
    On timeout the whole process group is killed and the result reports
    ``timed_out``.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    script_file = Path(script_path) if script_path else workdir / ".opflow-script"
    log_file = Path(log_path) if log_path else workdir / ".opflow-log"
    script_file.parent.mkdir(parents=True, exist_ok=True)
    log_file.parent.mkdir(parents=True, exist_ok=True)
    script_file.write_text(template.script, encoding="utf-8")
    if inputs is not None:
        manifest = {
            name: getattr(value, "text", getattr(value, "location", str(value)))
            for name, value in inputs.items()
        }
        (script_file.parent / f"{script_file.name}.inputs.json").write_text(
            json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
        )

    argv = list(template.command) + [str(script_file)]
    started = time.monotonic()
    timed_out = False
    with log_file.open("wb") as log:
        try:
            process = subprocess.Popen(
                argv,
                cwd=workdir,
                stdout=log,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as exc:
            log.write(f"spawn failed: {exc}\n".encode())
            return ExecResult(
                exit_code=127,
                stdout_path=log_file,
                stderr_path=log_file,
                duration=time.monotonic() - started,
            )
        try:
            exit_code = process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            simbatch.kill_process_group(process)
            exit_code = process.wait()
            timed_out = True
    duration = time.monotonic() - started

    result = ExecResult(
        exit_code=exit_code,
        stdout_path=log_file,
        stderr_path=log_file,
        duration=duration,
        timed_out=timed_out,
    )
    if timed_out or exit_code != EXIT_SUCCESS:
        return result

    out_params: dict[str, str] = {}
    for name, rel in template.output_parameter_sources.items():
        source = workdir / rel
        if not source.is_file():
            spec = template.outputs.parameters.get(name)
            if spec is not None and spec.optional:
                continue
            raise MissingOutputFile(
                f"output parameter {name!r}: no file at {rel!r} after exit 0"
            )
        out_params[name] = read_value_text(source)
    out_artifacts: dict[str, Path] = {}
    for name, rel in template.output_artifact_sources.items():
        source = workdir / rel
        if not source.exists():
            spec = template.outputs.artifacts.get(name)
            if spec is not None and spec.optional:
                continue
            raise MissingOutputFile(
                f"output artifact {name!r}: nothing at {rel!r} after exit 0"
            )
        out_artifacts[name] = source
    return replace(result, output_parameters=out_params, output_artifacts=out_artifacts)


# ---------------------------------------------------------------------------
# Job scripts


def build_job_script(batch_type: str, resources: ResourceSpec, body: str) -> str:
    """Dialect header + body.  The sim header is a stable, documented format."""
    q, c = resources.queue, resources.cpu
    m, w = resources.memory_mb, resources.walltime_seconds
    if batch_type == "sim":
        header = (
            f"#OPFLOW queue={q}\n"
            f"#OPFLOW cpu={c}\n"
            f"#OPFLOW memory_mb={m}\n"
            f"#OPFLOW walltime={w}\n"
        )
    elif batch_type == "slurm-dialect":
        header = (
            "#!/bin/bash\n"
            f"#SBATCH --partition={q}\n"
            f"#SBATCH --cpus-per-task={c}\n"
            f"#SBATCH --mem={m}M\n"
            f"#SBATCH --time={_hms(w)}\n"
        )
    elif batch_type == "pbs-dialect":
        header = (
            "#!/bin/bash\n"
            f"#PBS -q {q}\n"
            f"#PBS -l select=1:ncpus={c}:mem={m}mb\n"
            f"#PBS -l walltime={_hms(w)}\n"
        )
    else:
        raise ValueError(f"unknown batch_type {batch_type!r}")
    return header + body


def _hms(seconds: int) -> str:
    return f"{seconds // 3600}:{seconds % 3600 // 60:02d}:{seconds % 60:02d}"


def build_sim_job_body(
    storage_root: str,
    in_key: str,
    out_key: str,
    command: tuple[str, ...],
    payload: str,
) -> str:
    """Shell body: pull staged inputs, run the original script, push results.

    The payload rides inside a quoted heredoc, so nothing in it is expanded;
    the delimiter is lengthened until it cannot collide with payload lines.
    """
    delimiter = "OPFLOW_PAYLOAD"
    while delimiter in payload:
        delimiter += "_X"
    python = shlex.quote(sys.executable)
    root = shlex.quote(storage_root)
    run = " ".join(shlex.quote(part) for part in command)
    return (
        f"{python} -m opflow.stagetool download {root} {shlex.quote(in_key)} .\n"
        f"cat > ./.opflow-payload <<'{delimiter}'\n"
        f"{payload}\n"
        f"{delimiter}\n"
        f"{run} ./.opflow-payload\n"
        "rc=$?\n"
        f"{python} -m opflow.stagetool upload {root} {shlex.quote(out_key)} .\n"
        "exit $rc\n"
    )


# ---------------------------------------------------------------------------
# Dispatcher executor

_WRAPPER_SOURCE = '''\
"""Dispatcher wrapper: stage out, submit, poll, stage back (generated)."""
import sys
import time
import uuid

from opflow import executors, simbatch, storage

CONFIG = __CONFIG__


def main() -> int:
    client = storage.FilesystemStorage(CONFIG["storage_root"])
    stage = "dispatch-staging/" + uuid.uuid4().hex
    in_key, out_key = stage + "/in", stage + "/out"
    client.upload(".", in_key)

    resources = simbatch.ResourceSpec(
        cpu=CONFIG["cpu"],
        memory_mb=CONFIG["memory_mb"],
        queue=CONFIG["queue"],
        walltime_seconds=CONFIG["walltime_seconds"],
    )
    if CONFIG["batch_type"] != "sim":
        print(
            "submission failed: batch system %r is not reachable from this host"
            % CONFIG["batch_type"],
            file=sys.stderr,
        )
        return executors.EXIT_TRANSIENT
    body = executors.build_sim_job_body(
        CONFIG["storage_root"],
        in_key,
        out_key,
        tuple(CONFIG["command"]),
        CONFIG["payload"],
    )
    script_text = executors.build_job_script(CONFIG["batch_type"], resources, body)
    job_script = "./.opflow-job-script"
    with open(job_script, "w", encoding="utf-8") as handle:
        handle.write(script_text)
    try:
        job = simbatch.sim_batch_submit(
            CONFIG["work_root"], job_script, resources, command=("/bin/sh",)
        )
    except Exception as exc:
        print("submission failed: %s" % exc, file=sys.stderr)
        return executors.EXIT_TRANSIENT

    deadline = time.monotonic() + CONFIG["walltime_seconds"] + CONFIG["poll_grace"]
    while True:
        state = simbatch.sim_batch_poll(CONFIG["work_root"], job.job_id)
        if state in simbatch.TERMINAL_STATES:
            break
        if time.monotonic() > deadline:
            print(
                "poll timeout: job %s still %s past walltime + grace"
                % (job.job_id, state),
                file=sys.stderr,
            )
            return 1
        time.sleep(CONFIG["poll_interval"])

    if state == simbatch.STATE_TIMED_OUT:
        print("job %s hit its walltime" % job.job_id, file=sys.stderr)
        return executors.EXIT_TRANSIENT if CONFIG["timeout_is_transient"] else 1
    if state == simbatch.STATE_FAILED:
        rc = simbatch.read_job_rc(CONFIG["work_root"], job.job_id)
        print("job %s failed with rc %s" % (job.job_id, rc), file=sys.stderr)
        return rc if rc else 1
    storage.merge_download(client, out_key, ".")
    return 0


if __name__ == "__main__":
    sys.exit(main())
'''


class DispatcherExecutor(Executor):
    """Render scripts into submit-and-poll wrappers against a batch system.

    The wrapper uploads the step's prepared working directory to staging,
    submits a job whose script carries the dialect header plus the original
    payload, polls at ``poll_interval`` until the job is terminal (giving up
    ``poll_grace`` seconds past the walltime), then downloads the job's
    working directory back over its own.  Job outcomes map onto the exit-code
    convention: Completed becomes 0, Failed propagates the job's exit code,
    TimedOut becomes transient or fatal per ``timeout_is_transient``, and a
    submission failure is transient.
    """

    name = "dispatcher"

    def __init__(
        self,
        machine: MachineSpec,
        resources: ResourceSpec,
        storage_root: str | Path,
        *,
        poll_interval: float = 0.5,
        poll_grace: float = 30.0,
        timeout_is_transient: bool = False,
    ) -> None:
        self.machine = machine
        self.resources = resources
        self.storage_root = str(storage_root)
        self.poll_interval = poll_interval
        self.poll_grace = poll_grace
        self.timeout_is_transient = timeout_is_transient

    def render(self, template: ScriptTemplate) -> ScriptTemplate:
        config = {
            "batch_type": self.machine.batch_type,
            "work_root": str(self.machine.work_root),
            "storage_root": self.storage_root,
            "cpu": self.resources.cpu,
            "memory_mb": self.resources.memory_mb,
            "queue": self.resources.queue,
            "walltime_seconds": self.resources.walltime_seconds,
            "poll_interval": self.poll_interval,
            "poll_grace": self.poll_grace,
            "timeout_is_transient": self.timeout_is_transient,
            "command": list(template.command),
            "payload": template.script,
        }
        script = _WRAPPER_SOURCE.replace("__CONFIG__", repr(config))
        return replace(template, command=(sys.executable,), script=script)


def dispatcher_render(
    template: ScriptTemplate,
    machine: MachineSpec,
    resources: ResourceSpec,
    storage_root: str | Path,
    **options,
) -> ScriptTemplate:
    """One-shot form of :class:`DispatcherExecutor`."""
    return DispatcherExecutor(machine, resources, storage_root, **options).render(template)
