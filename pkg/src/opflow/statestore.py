"""On-disk workflow state in a flat, inspectable directory layout.

Every workflow owns ``<root>/<wf-id>/`` containing ``status`` (workflow phase
word), ``spec.yaml`` (the submitted document, kept for retry), and one
directory per step instance named by its key.  A step directory holds
``type`` (Pod | Steps | DAG), ``phase``, ``meta.json``, and per-name files
under ``inputs/parameters``, ``inputs/artifacts`` (storage keys, not copies),
``outputs/parameters``, ``outputs/artifacts``; Pod steps additionally get
``script``, ``log``, and ``workdir/`` from the scheduler.

Write discipline: every file is written atomically (temp + rename), phase is
written last so a crash never shows outputs for a step whose phase does not
claim them, and parameter files hold raw text while readers strip exactly one
trailing newline (the same rule scripts get for their output files).  One
writer per workflow; readers may poll concurrently and always see complete
words.
"""

from __future__ import annotations

import dataclasses
import json
import re
import threading
import uuid
from collections import defaultdict
from pathlib import Path

from .errors import (
    IllegalPhaseTransition,
    TypeMismatch,
    UnknownOutput,
    UnknownWorkflow,
)
from .fsutil import atomic_write_text, read_value_text, write_if_changed
from .model import (
    ArtifactValue,
    Failure,
    OUTPUT_BEARING_PHASES,
    ParameterValue,
    Phase,
    StepRecord,
    TypeTag,
    canonical_text,
    is_legal_transition,
)

STATUS_FILE = "status"
SPEC_FILE = "spec.yaml"
_STEP_FILES = {STATUS_FILE, SPEC_FILE}

# Step keys double as directory names, so they must stay path-safe.
STEP_KEY_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,254}$")


def is_safe_step_key(key: str) -> bool:
    return (
        isinstance(key, str)
        and STEP_KEY_RE.match(key) is not None
        and key not in (".", "..")
        and key not in _STEP_FILES
    )


# ---------------------------------------------------------------------------
# In-memory record modification (for reuse sets)


def modify_output_parameter(
    record: StepRecord, name: str, value: str | ParameterValue
) -> StepRecord:
    """Return a copy of ``record`` with one output parameter replaced.

    The persisted record is untouched; modifications only matter in the reuse
    set handed to a resubmission.  The replacement must parse under the
    output's existing tag.
    """
    if record.phase not in OUTPUT_BEARING_PHASES:
        raise IllegalPhaseTransition(
            f"cannot modify outputs of a {record.phase.value} record"
        )
    if name not in record.output_parameters:
        raise UnknownOutput(f"record {record.key!r} has no output parameter {name!r}")
    tag = record.output_parameters[name].type_tag
    text = value.text if isinstance(value, ParameterValue) else value
    if not isinstance(text, str):
        raise TypeMismatch(f"replacement for {name!r} must be text")
    replaced = ParameterValue(canonical_text(tag, text), tag)
    out = dict(record.output_parameters)
    out[name] = replaced
    return dataclasses.replace(record, output_parameters=out)


def modify_output_artifact(
    record: StepRecord, name: str, location: str | ArtifactValue
) -> StepRecord:
    """Return a copy of ``record`` with one output artifact relocated."""
    if record.phase not in OUTPUT_BEARING_PHASES:
        raise IllegalPhaseTransition(
            f"cannot modify outputs of a {record.phase.value} record"
        )
    if name not in record.output_artifacts:
        raise UnknownOutput(f"record {record.key!r} has no output artifact {name!r}")
    if isinstance(location, ArtifactValue):
        location = location.location
    if not isinstance(location, str) or not location:
        raise TypeMismatch(f"replacement location for {name!r} must be nonempty text")
    out = dict(record.output_artifacts)
    out[name] = ArtifactValue(location, optional=record.output_artifacts[name].optional)
    return dataclasses.replace(record, output_artifacts=out)


# ---------------------------------------------------------------------------
# Store


class WorkflowStore:
    """Reader/writer for the workflow directory layout."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock(self, workflow_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[workflow_id]

    def workflow_dir(self, workflow_id: str) -> Path:
        return self.root / workflow_id

    def _require(self, workflow_id: str) -> Path:
        path = self.workflow_dir(workflow_id)
        if not path.is_dir():
            raise UnknownWorkflow(f"no workflow {workflow_id!r}")
        return path

    def exists(self, workflow_id: str) -> bool:
        return self.workflow_dir(workflow_id).is_dir()

    # -- workflow lifecycle

    def create_workflow(self, name: str, spec_text: str) -> str:
        """Allocate ``<name>-<uuid8>``, store the spec, set status Pending."""
        for _ in range(16):
            workflow_id = f"{name}-{uuid.uuid4().hex[:8]}"
            path = self.workflow_dir(workflow_id)
            try:
                path.mkdir(parents=True)
            except FileExistsError:
                continue
            atomic_write_text(path / SPEC_FILE, spec_text)
            atomic_write_text(path / STATUS_FILE, Phase.PENDING.value)
            return workflow_id
        raise RuntimeError("could not allocate a fresh workflow id")

    def read_status(self, workflow_id: str) -> Phase:
        path = self._require(workflow_id) / STATUS_FILE
        return Phase(path.read_text(encoding="utf-8").strip())

    def write_status(self, workflow_id: str, phase: Phase) -> None:
        current = self.read_status(workflow_id)
        if not is_legal_transition(current, phase):
            raise IllegalPhaseTransition(
                f"workflow {workflow_id}: {current.value} -> {phase.value}"
            )
        atomic_write_text(self.workflow_dir(workflow_id) / STATUS_FILE, phase.value)

    def read_spec_text(self, workflow_id: str) -> str:
        return (self._require(workflow_id) / SPEC_FILE).read_text(encoding="utf-8")

    def list_workflows(self) -> list[tuple[str, Phase]]:
        out = []
        for entry in sorted(self.root.iterdir()):
            if entry.is_dir() and (entry / STATUS_FILE).is_file():
                try:
                    phase = Phase((entry / STATUS_FILE).read_text("utf-8").strip())
                except ValueError:
                    continue
                out.append((entry.name, phase))
        return out

    # -- step persistence

    def step_dir(self, workflow_id: str, key: str) -> Path:
        return self.workflow_dir(workflow_id) / key

    def persist_step(self, workflow_id: str, record: StepRecord) -> None:
        """Write the record's directory; idempotent for identical records.

        Phase is committed last and checked against the on-disk phase, so an
        illegal transition (e.g. rewriting a Succeeded step as Failed) fails
        loudly instead of corrupting history.
        """
        wf_dir = self._require(workflow_id)
        if not is_safe_step_key(record.key):
            raise ValueError(f"step key is not directory-safe: {record.key!r}")
        step_dir = wf_dir / record.key
        with self._lock(workflow_id):
            phase_path = step_dir / "phase"
            if phase_path.is_file():
                current = Phase(phase_path.read_text("utf-8").strip())
                if not is_legal_transition(current, record.phase):
                    raise IllegalPhaseTransition(
                        f"step {record.key!r}: {current.value} -> {record.phase.value}"
                    )
            step_dir.mkdir(parents=True, exist_ok=True)
            write_if_changed(step_dir / "type", record.type_word)
            write_if_changed(step_dir / "meta.json", self._meta_text(record))
            for name, value in record.input_parameters.items():
                write_if_changed(step_dir / "inputs" / "parameters" / name, value.text)
            for name, value in record.input_artifacts.items():
                write_if_changed(step_dir / "inputs" / "artifacts" / name, value.location)
            if record.phase in OUTPUT_BEARING_PHASES:
                for name, value in record.output_parameters.items():
                    write_if_changed(
                        step_dir / "outputs" / "parameters" / name, value.text
                    )
                for name, value in record.output_artifacts.items():
                    write_if_changed(
                        step_dir / "outputs" / "artifacts" / name, value.location
                    )
            write_if_changed(phase_path, record.phase.value)

    @staticmethod
    def _meta_text(record: StepRecord) -> str:
        meta = {
            "name": record.name,
            "template": record.template,
            "key": record.key,
            "key_source": record.key_source,
            "attempt": record.attempt,
            "parent": record.parent,
            "slice_index": record.slice_index,
            "seq": record.seq,
            "started_at": record.started_at,
            "ended_at": record.ended_at,
            "failure": (
                {"kind": record.failure.kind, "message": record.failure.message}
                if record.failure
                else None
            ),
            "dag_edges": (
                [list(edge) for edge in record.dag_edges]
                if record.dag_edges is not None
                else None
            ),
            "parameter_tags": {
                "inputs": {
                    name: value.type_tag.value
                    for name, value in record.input_parameters.items()
                },
                "outputs": {
                    name: value.type_tag.value
                    for name, value in record.output_parameters.items()
                },
            },
            "artifact_flags": {
                "inputs": {
                    name: value.optional
                    for name, value in record.input_artifacts.items()
                },
                "outputs": {
                    name: value.optional
                    for name, value in record.output_artifacts.items()
                },
            },
        }
        return json.dumps(meta, indent=1, sort_keys=True)

    # -- loading

    def load_step(self, workflow_id: str, key: str) -> StepRecord:
        step_dir = self._require(workflow_id) / key
        meta = json.loads((step_dir / "meta.json").read_text("utf-8"))
        phase = Phase(read_value_text(step_dir / "phase"))
        type_word = read_value_text(step_dir / "type")

        def read_parameters(side: str) -> dict[str, ParameterValue]:
            directory = step_dir / side / "parameters"
            tags = meta["parameter_tags"].get(
                "inputs" if side == "inputs" else "outputs", {}
            )
            out: dict[str, ParameterValue] = {}
            if directory.is_dir():
                for entry in sorted(directory.iterdir()):
                    tag = TypeTag(tags.get(entry.name, "string"))
                    out[entry.name] = ParameterValue(read_value_text(entry), tag)
            return out

        def read_artifacts(side: str) -> dict[str, ArtifactValue]:
            directory = step_dir / side / "artifacts"
            flags = meta["artifact_flags"].get(
                "inputs" if side == "inputs" else "outputs", {}
            )
            out: dict[str, ArtifactValue] = {}
            if directory.is_dir():
                for entry in sorted(directory.iterdir()):
                    out[entry.name] = ArtifactValue(
                        read_value_text(entry), optional=bool(flags.get(entry.name))
                    )
            return out

        failure = None
        if meta.get("failure"):
            failure = Failure(meta["failure"]["kind"], meta["failure"].get("message", ""))
        outputs_visible = phase in OUTPUT_BEARING_PHASES
        return StepRecord(
            key=meta["key"],
            name=meta["name"],
            template=meta["template"],
            type_word=type_word,
            phase=phase,
            attempt=meta.get("attempt", 0),
            key_source=meta.get("key_source", "generated"),
            input_parameters=read_parameters("inputs"),
            input_artifacts=read_artifacts("inputs"),
            output_parameters=read_parameters("outputs") if outputs_visible else {},
            output_artifacts=read_artifacts("outputs") if outputs_visible else {},
            parent=meta.get("parent"),
            slice_index=meta.get("slice_index"),
            seq=meta.get("seq", 0),
            started_at=meta.get("started_at"),
            ended_at=meta.get("ended_at"),
            failure=failure,
            dag_edges=(
                tuple((a, b) for a, b in meta["dag_edges"])
                if meta.get("dag_edges") is not None
                else None
            ),
        )

    def list_steps(self, workflow_id: str) -> list[StepRecord]:
        wf_dir = self._require(workflow_id)
        records = []
        for entry in wf_dir.iterdir():
            if not entry.is_dir() or entry.name in _STEP_FILES:
                continue
            if not (entry / "meta.json").is_file() or not (entry / "phase").is_file():
                continue  # a step directory mid-creation; skip the husk
            records.append(self.load_step(workflow_id, entry.name))
        records.sort(key=lambda r: (r.seq, r.key))
        return records

    def query_step(self, workflow_id: str, key: str) -> StepRecord | None:
        """Exact-key lookup; None when the workflow has no such step."""
        wf_dir = self._require(workflow_id)
        step_dir = wf_dir / key
        if (
            not step_dir.is_dir()
            or not (step_dir / "meta.json").is_file()
            or not (step_dir / "phase").is_file()
        ):
            return None
        return self.load_step(workflow_id, key)

    def harvest_reuse(self, workflow_id: str) -> list[StepRecord]:
        """All explicitly keyed records whose outputs are trustworthy."""
        return [
            record
            for record in self.list_steps(workflow_id)
            if record.phase in OUTPUT_BEARING_PHASES and record.key_source == "explicit"
        ]
