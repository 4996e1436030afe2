"""Owns workflow runs for one data directory.

A RunManager wraps one Engine and executes each submitted workflow on a
daemon thread.  It is the single writer for its home directory: a workflow
found Running on disk that no live thread owns is an orphan from a previous
process and is marked Failed before anything else touches it.
"""

from __future__ import annotations

import threading
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from ..errors import UnknownStep, WorkflowStillRunning
from ..model import Phase, StepRecord, TERMINAL_PHASES, WorkflowSpec
from ..scheduler import Engine, RunConfig, WorkflowResult
from ..specdoc import load_spec_text
from ..validation import ValidationReport, validate_workflow


class RunManager:
    def __init__(self, home: str | Path, *, default_config: RunConfig | None = None):
        self.engine = Engine(home)
        self.default_config = default_config or RunConfig()
        self._lock = threading.Lock()
        self._active: dict[str, threading.Thread] = {}

    # -- lifecycle

    def sweep_orphans(self) -> list[str]:
        """Mark Running workflows owned by no live thread as Failed."""
        orphaned = []
        for workflow_id, phase in self.engine.store.list_workflows():
            if phase is Phase.RUNNING and not self.owns(workflow_id):
                self.engine.store.write_status(workflow_id, Phase.FAILED)
                orphaned.append(workflow_id)
        return orphaned

    def owns(self, workflow_id: str) -> bool:
        with self._lock:
            thread = self._active.get(workflow_id)
        return thread is not None and thread.is_alive()

    def join(self, timeout: float | None = None) -> None:
        """Wait for every active run to finish (tests and clean shutdown)."""
        with self._lock:
            threads = list(self._active.values())
        for thread in threads:
            thread.join(timeout)

    # -- operations

    def apply_overrides(
        self, spec: WorkflowSpec, parameters: dict[str, str]
    ) -> WorkflowSpec:
        if not parameters:
            return spec
        gi = spec.global_inputs
        merged = dict(gi.parameter_values)
        merged.update(parameters)
        return replace(spec, global_inputs=replace(gi, parameter_values=merged))

    def validate(
        self, spec_text: str, parameters: dict[str, str] | None = None
    ) -> ValidationReport:
        spec = self.apply_overrides(load_spec_text(spec_text), parameters or {})
        return validate_workflow(spec)

    def submit(
        self,
        spec_text: str,
        *,
        parameters: dict[str, str] | None = None,
        parallelism: int | None = None,
        sequential: bool = False,
        reuse: Sequence[StepRecord] = (),
    ) -> str:
        spec = self.apply_overrides(load_spec_text(spec_text), parameters or {})
        workflow_id = self.engine.prepare(spec)
        self._launch(workflow_id, self._config(parallelism, sequential), reuse)
        return workflow_id

    def retry(
        self,
        workflow_id: str,
        *,
        parallelism: int | None = None,
        sequential: bool = False,
    ) -> str:
        """Resubmit a finished workflow's spec, reusing its keyed outputs.

        A Running workflow owned by a live thread cannot be retried; a
        Running workflow owned by nobody is a leftover from a dead process
        and is first marked Failed.
        """
        phase = self.engine.store.read_status(workflow_id)
        if phase in (Phase.PENDING, Phase.RUNNING):
            if self.owns(workflow_id) or phase is Phase.PENDING:
                raise WorkflowStillRunning(
                    f"workflow {workflow_id} is {phase.value}; retry needs a "
                    "finished workflow"
                )
            self.engine.store.write_status(workflow_id, Phase.FAILED)
        reuse = self.engine.store.harvest_reuse(workflow_id)
        spec_text = self.engine.store.read_spec_text(workflow_id)
        new_id = self.engine.prepare(load_spec_text(spec_text))
        self._launch(new_id, self._config(parallelism, sequential), reuse)
        return new_id

    def harvest(
        self, workflow_id: str, keys: Sequence[str] = ()
    ) -> list[StepRecord]:
        """Reusable records of a previous workflow, optionally key-filtered."""
        records = self.engine.store.harvest_reuse(workflow_id)
        if keys:
            wanted = set(keys)
            records = [r for r in records if r.key in wanted]
        return records

    def status(self, workflow_id: str) -> Phase:
        return self.engine.store.read_status(workflow_id)

    def workflows(self) -> list[tuple[str, Phase]]:
        return self.engine.store.list_workflows()

    def steps(self, workflow_id: str) -> list[StepRecord]:
        self.engine.store.read_status(workflow_id)  # 404 for unknown ids
        return self.engine.store.list_steps(workflow_id)

    def step(self, workflow_id: str, key: str) -> StepRecord:
        self.engine.store.read_status(workflow_id)
        record = self.engine.store.query_step(workflow_id, key)
        if record is None:
            raise UnknownStep(f"workflow {workflow_id} has no step {key!r}")
        return record

    def step_log(self, workflow_id: str, key: str, offset: int = 0) -> str:
        self.step(workflow_id, key)  # existence check
        path = self.engine.store.step_dir(workflow_id, key) / "log"
        if not path.is_file():
            return ""
        data = path.read_bytes()
        return data[offset:].decode("utf-8", errors="replace")

    def result(self, workflow_id: str) -> WorkflowResult:
        return self.engine.result(workflow_id)

    def is_terminal(self, workflow_id: str) -> bool:
        return self.status(workflow_id) in TERMINAL_PHASES

    # -- internals

    def _config(self, parallelism: int | None, sequential: bool) -> RunConfig:
        config = self.default_config
        changes: dict[str, object] = {}
        if parallelism is not None:
            changes["parallelism"] = parallelism
        if sequential:
            changes["sequential"] = True
        return replace(config, **changes) if changes else config

    def _launch(
        self, workflow_id: str, config: RunConfig, reuse: Sequence[StepRecord]
    ) -> None:
        def run() -> None:
            try:
                self.engine.execute(workflow_id, config=config, reuse=reuse)
            except Exception:
                pass  # execute already recorded the Failed status
            finally:
                with self._lock:
                    self._active.pop(workflow_id, None)

        thread = threading.Thread(
            target=run, name=f"opflow-run-{workflow_id}", daemon=True
        )
        with self._lock:
            self._active[workflow_id] = thread
        thread.start()
