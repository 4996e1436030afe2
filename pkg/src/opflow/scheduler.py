"""Workflow execution: body ordering, slices, conditions, policies, reuse.

The engine walks a validated spec top-down from its entrypoint.  Steps bodies
run strictly in order; DAG bodies run tasks as their dependency edges allow,
concurrently up to the configured parallelism.  Every step instance becomes a
persisted StepRecord before, during, and after it runs, so a crash at any
point leaves only legal phase words behind.  A sequential mode executes the
same semantics single-threaded and must produce identical phases; tests use
it as the reference interpreter.
"""

from __future__ import annotations

import hashlib
import math
import queue
import shutil
import sys
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (
    DuplicateKey,
    OpflowError,
    RecursionLimitExceeded,
    SliceError,
    SliceLengthMismatch,
    UnavailableOutput,
)
from .executors import Executor, LocalExecutor, local_execute
from .expr import evaluate_condition, iter_placeholder_paths, render_placeholders
from .model import (
    ArtifactSpec,
    ArtifactValue,
    DagTemplate,
    Failure,
    ItemFieldRef,
    ItemRef,
    LiteralRef,
    OUTPUT_BEARING_PHASES,
    OpTemplate,
    ParameterSpec,
    ParameterValue,
    Phase,
    RetryPolicy,
    ScriptTemplate,
    Signature,
    StepDef,
    StepOutputRef,
    StepRecord,
    StepsTemplate,
    TemplateInputRef,
    TypeTag,
    WorkflowInputRef,
    WorkflowSpec,
    split_io,
    step_type_word,
    typecheck_io,
)
from .specdoc import dump_spec_text, load_spec_text
from .statestore import WorkflowStore, is_safe_step_key
from .storage import FilesystemStorage, StorageClient
from .validation import infer_dag_dependencies, require_valid


class Clock:
    """Injectable time source; tests substitute a fake for instant backoff."""

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one workflow run."""

    parallelism: int = 16
    max_recursion_depth: int = 100
    default_executor: str = "local"
    sequential: bool = False
    retry_backoff_seconds: float = 1.0
    clock: Clock = field(default_factory=Clock)

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.max_recursion_depth < 1:
            raise ValueError("max_recursion_depth must be >= 1")
        if self.retry_backoff_seconds < 0:
            raise ValueError("retry_backoff_seconds must be >= 0")


@dataclass
class WorkflowResult:
    """Final (or snapshot) view of one workflow run."""

    workflow_id: str
    phase: Phase
    steps: list[StepRecord]
    # script executions performed by the run that produced this result;
    # None for read-only snapshots
    executions: int | None = None

    @property
    def succeeded(self) -> bool:
        return self.phase is Phase.SUCCEEDED

    def step(self, key: str) -> StepRecord | None:
        for record in self.steps:
            if record.key == key:
                return record
        return None


# ---------------------------------------------------------------------------
# Policy decisions (free functions so tests can hit them directly)


def apply_fault_policy(retry: RetryPolicy, kind: str, attempt: int) -> str:
    """Decide 'succeed' | 'retry' | 'fail' after attempt number ``attempt``.

    Timeouts count as transient only when the policy says so; a transient
    failure retries while the attempt count has not used up
    max_retries_on_transient extra runs.
    """
    if kind == "success":
        return "succeed"
    transient = kind == "transient" or (kind == "timeout" and retry.timeout_is_transient)
    if transient and attempt <= retry.max_retries_on_transient:
        return "retry"
    return "fail"


def success_threshold(step: StepDef, n: int) -> int:
    """How many slice instances must succeed for the group to succeed."""
    if step.continue_on_num_success is not None:
        return step.continue_on_num_success
    if step.continue_on_success_ratio is not None:
        return math.ceil(step.continue_on_success_ratio * n)
    return n


def decide_group_phase(
    step: StepDef, phases: Sequence[Phase]
) -> tuple[Phase, str | None]:
    """Group phase for a sliced step from its instance phases.

    With a success-count policy the group succeeds iff enough instances bear
    outputs; without one, any failed instance fails the group (instances
    skipped by their own condition do not).
    """
    n = len(phases)
    succeeded = sum(p in OUTPUT_BEARING_PHASES for p in phases)
    failed = sum(p is Phase.FAILED for p in phases)
    if step.continue_on_num_success is None and step.continue_on_success_ratio is None:
        if failed:
            return Phase.FAILED, f"{failed} of {n} slice instances failed"
        return Phase.SUCCEEDED, None
    need = success_threshold(step, n)
    if succeeded >= need:
        return Phase.SUCCEEDED, None
    return (
        Phase.FAILED,
        f"only {succeeded} of {n} slice instances succeeded (needed {need})",
    )


def evaluate_when(step: StepDef, scope: Mapping[str, object]) -> bool:
    """True when the step should run; a missing condition always runs."""
    if step.when is None:
        return True
    return evaluate_condition(step.when, scope)


def resolve_reuse(
    key: str | None, reuse: Mapping[str, StepRecord]
) -> StepRecord | None:
    """Exact key match against the supplied reuse records."""
    if key is None:
        return None
    return reuse.get(key)


def mentions_item(text: str) -> bool:
    return any(
        path == "item" or path.startswith("item.")
        for path in iter_placeholder_paths(text)
    )


def check_recursion_depth(
    stack: Sequence[str], template_name: str, limit: int
) -> None:
    """Raise once a template appears ``limit`` times in its own call stack."""
    if stack.count(template_name) >= limit:
        raise RecursionLimitExceeded(
            f"recursion depth limit ({limit}) reached for template "
            f"{template_name!r}"
        )


def derive_child_key(parent: str | None, name: str) -> str:
    """Deterministic generated key: the instantiation path joined by '--'.

    Long paths (deep recursion) are truncated with a digest suffix so keys
    stay directory-safe; the digest covers the full path, so distinct paths
    keep distinct keys.
    """
    key = name if parent is None else f"{parent}--{name}"
    if len(key) > 200:
        digest = hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]
        key = f"{key[:187]}.{digest}"
    return key


# ---------------------------------------------------------------------------
# Slice fan-out / fan-in


@dataclass
class SliceInstance:
    """Concrete bindings for one fan-out index."""

    index: int
    # sliced input name -> element i (native JSON value or child ArtifactValue)
    overrides: dict[str, object]
    # native element backing {{item}}, or _NO_ITEM when no parameter is sliced
    item: object


_NO_ITEM = object()


def expand_slices(
    step: StepDef,
    target: OpTemplate,
    group_values: Mapping[str, object],
    storage: StorageClient,
) -> list[SliceInstance]:
    """Split the group-level inputs of a sliced step into per-index instances.

    Parameter slices come from JSON lists; artifact slices from the ordered
    direct children of the artifact's location (numeric names sort
    numerically, otherwise lexicographically).  All present sliced inputs
    must agree on length.
    """
    assert step.slices is not None
    lists: dict[str, list] = {}
    for name in step.slices.sliced_inputs:
        if name not in group_values:
            continue  # optional input left unbound; instances omit it
        value = group_values[name]
        if isinstance(value, ParameterValue):
            data = value.value
            if not isinstance(data, list):
                raise SliceError(
                    f"sliced input {name!r} must be a JSON list, got "
                    f"{type(data).__name__}"
                )
            lists[name] = data
        else:
            prefix = value.location.rstrip("/")
            children: set[str] = set()
            for key in storage.list(prefix):
                if key == prefix:
                    raise SliceError(
                        f"sliced artifact {name!r} is a single file; it needs "
                        "one child entry per slice"
                    )
                children.add(key[len(prefix) + 1 :].split("/", 1)[0])
            if children and all(c.isdigit() for c in children):
                ordered = sorted(children, key=int)
            else:
                ordered = sorted(children)
            lists[name] = [ArtifactValue(f"{prefix}/{c}") for c in ordered]
    if not lists:
        raise SliceError("no sliced input is bound")
    lengths = {name: len(data) for name, data in lists.items()}
    if len(set(lengths.values())) > 1:
        detail = ", ".join(f"{n}={l}" for n, l in lengths.items())
        raise SliceLengthMismatch(f"sliced inputs differ in length: {detail}")
    n = next(iter(lengths.values()))

    # {{item}} mirrors the first sliced *parameter* input, in declaration order
    param_slots = {
        name for name in lists if isinstance(group_values[name], ParameterValue)
    }
    item_slot = next(
        (name for name in step.slices.sliced_inputs if name in param_slots), None
    )
    instances = []
    for i in range(n):
        overrides = {name: lists[name][i] for name in lists}
        item = lists[item_slot][i] if item_slot is not None else _NO_ITEM
        instances.append(SliceInstance(index=i, overrides=overrides, item=item))
    return instances


def item_scope_entries(item: object) -> dict[str, ParameterValue]:
    """Placeholder entries for {{item}} and {{item.<field>}}."""
    if item is _NO_ITEM:
        return {}
    entries = {"item": ParameterValue.of(item)}
    if isinstance(item, dict):
        for name, value in item.items():
            if isinstance(name, str) and "." not in name:
                entries[f"item.{name}"] = ParameterValue.of(value)
    return entries


def aggregate_slice_outputs(
    step: StepDef,
    target: OpTemplate,
    records: Sequence[StepRecord],
    storage: StorageClient,
    artifact_prefix: str,
) -> dict[str, object]:
    """Stack instance outputs by index; gaps (failed/skipped) become nulls.

    Stacked parameters become JSON lists; stacked artifacts become a
    directory-shaped location whose children are named by index.  The result
    depends only on the records and their indices, never on completion order.
    """
    assert step.slices is not None
    raw: dict[str, object] = {}
    for name in step.slices.stacked_outputs:
        if name in target.outputs.parameters:
            elements = []
            for record in records:
                if (
                    record.phase in OUTPUT_BEARING_PHASES
                    and name in record.output_parameters
                ):
                    elements.append(record.output_parameters[name].value)
                else:
                    elements.append(None)
            raw[name] = ParameterValue.of(elements, TypeTag.JSON)
        else:
            location = f"{artifact_prefix}/{name}"
            storage.upload(_empty_dir(), location)
            for i, record in enumerate(records):
                if (
                    record.phase in OUTPUT_BEARING_PHASES
                    and name in record.output_artifacts
                ):
                    storage.copy(
                        record.output_artifacts[name].location, f"{location}/{i}"
                    )
            raw[name] = ArtifactValue(location)
    return raw


_EMPTY_DIR: Path | None = None
_EMPTY_DIR_LOCK = threading.Lock()


def _empty_dir() -> Path:
    """A shared empty directory used to materialize empty stacked artifacts."""
    global _EMPTY_DIR
    with _EMPTY_DIR_LOCK:
        if _EMPTY_DIR is None or not _EMPTY_DIR.is_dir():
            import tempfile

            _EMPTY_DIR = Path(tempfile.mkdtemp(prefix="opflow-empty-"))
        return _EMPTY_DIR


# ---------------------------------------------------------------------------
# Effective signatures at the group level of a sliced step


def group_input_signature(target: OpTemplate, step: StepDef) -> Signature:
    """What the step consumes before fan-out.

    Sliced parameter slots take a JSON list; slots bound per-item are filled
    per instance and drop out of the group check.  Defaults on sliced slots
    are per-instance values and do not apply to the list.
    """
    item_bound = {
        name
        for name, ref in step.input_bindings.items()
        if isinstance(ref, (ItemRef, ItemFieldRef))
    }
    sliced = set(step.slices.sliced_inputs) if step.slices is not None else set()
    parameters: dict[str, ParameterSpec] = {}
    for name, spec in target.inputs.parameters.items():
        if name in item_bound:
            continue
        if name in sliced:
            parameters[name] = ParameterSpec(TypeTag.JSON, optional=spec.optional)
        else:
            parameters[name] = spec
    artifacts = {
        name: spec
        for name, spec in target.inputs.artifacts.items()
        if name not in item_bound
    }
    return Signature(parameters, artifacts)


def group_output_signature(target: OpTemplate, step: StepDef | None) -> Signature:
    """What the step offers to siblings: full outputs, or stacked ones only."""
    if step is None or step.slices is None:
        return target.outputs
    stacked = set(step.slices.stacked_outputs)
    parameters = {
        name: ParameterSpec(TypeTag.JSON)
        for name in target.outputs.parameters
        if name in stacked
    }
    artifacts = {
        name: ArtifactSpec()
        for name in target.outputs.artifacts
        if name in stacked
    }
    return Signature(parameters, artifacts)


# ---------------------------------------------------------------------------
# Run context and template frames


@dataclass
class _Frame:
    """One instantiated super-template body (or the synthetic root body)."""

    parent_key: str | None
    prefix: str  # "steps" | "tasks"
    inputs: dict[str, object]
    results: dict[str, StepRecord] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def record_result(self, name: str, record: StepRecord) -> None:
        with self.lock:
            self.results[name] = record

    def scope(self, ctx: "_RunContext") -> dict[str, ParameterValue]:
        entries = {
            "workflow.name": ParameterValue(ctx.spec.name),
            "workflow.id": ParameterValue(ctx.workflow_id),
        }
        for name, value in self.inputs.items():
            if isinstance(value, ParameterValue):
                entries[f"inputs.parameters.{name}"] = value
        with self.lock:
            finished = list(self.results.items())
        for sibling, record in finished:
            if record.phase not in OUTPUT_BEARING_PHASES:
                continue
            for pname, pvalue in record.output_parameters.items():
                entries[f"{self.prefix}.{sibling}.outputs.parameters.{pname}"] = pvalue
        return entries


class _RunContext:
    """Everything shared by one workflow run."""

    def __init__(
        self,
        engine: "Engine",
        workflow_id: str,
        spec: WorkflowSpec,
        config: RunConfig,
        reuse: Sequence[StepRecord],
    ) -> None:
        self.engine = engine
        self.workflow_id = workflow_id
        self.spec = spec
        self.config = config
        self.store = engine.store
        self.storage = engine.storage
        self.semaphore = threading.BoundedSemaphore(config.parallelism)
        self.global_values: dict[str, object] = {}
        self.executions = 0
        self._lock = threading.Lock()
        self._seq = 0
        self._keys: set[str] = set()
        self.reuse_by_key: dict[str, StepRecord] = {}
        for record in reuse:
            if record.phase not in OUTPUT_BEARING_PHASES:
                raise ValueError(
                    f"reuse record {record.key!r} has phase {record.phase.value}; "
                    "only Succeeded or Reused records are reusable"
                )
            self.reuse_by_key[record.key] = record  # later records win

    def now(self) -> float:
        return self.config.clock.now()

    def next_seq(self) -> int:
        with self._lock:
            self._seq += 1
            return self._seq

    def claim_key(self, key: str) -> None:
        with self._lock:
            if key in self._keys:
                raise DuplicateKey(f"step key {key!r} resolved more than once")
            self._keys.add(key)

    def claim_fallback_key(self, generated: str, seq: int) -> str:
        """Claim the generated key, or a seq-suffixed variant if it is taken."""
        for candidate in (generated, f"{generated}-x{seq}"):
            try:
                self.claim_key(candidate)
                return candidate
            except DuplicateKey:
                continue
        raise DuplicateKey(f"could not allocate a key near {generated!r}")

    def count_execution(self) -> None:
        with self._lock:
            self.executions += 1
        self.engine._count_execution()

    def persist(self, record: StepRecord) -> None:
        self.store.persist_step(self.workflow_id, record)


# ---------------------------------------------------------------------------
# Engine


class Engine:
    """Library entrypoint: owns the state store, storage, and executors.

    ``script_runner`` is the seam between scheduling and process execution;
    it defaults to :func:`opflow.executors.local_execute` and is swapped out
    by tests for fault injection and ordering probes.
    """

    def __init__(
        self,
        home: str | Path,
        *,
        executors: Mapping[str, Executor] | None = None,
        script_runner=None,
    ) -> None:
        self.home = Path(home)
        self.home.mkdir(parents=True, exist_ok=True)
        self.store = WorkflowStore(self.home / "workflows")
        self.storage = FilesystemStorage(self.home / "artifacts")
        self.executors: dict[str, Executor] = {"local": LocalExecutor()}
        if executors:
            self.executors.update(executors)
        self.script_runner = script_runner or local_execute
        self.executions = 0
        self._metrics_lock = threading.Lock()

    def _count_execution(self) -> None:
        with self._metrics_lock:
            self.executions += 1

    # -- lifecycle

    def prepare(self, spec: WorkflowSpec) -> str:
        """Validate and register a workflow; returns its id (status Pending)."""
        require_valid(spec)
        return self.store.create_workflow(spec.name, dump_spec_text(spec))

    def run(
        self,
        spec: WorkflowSpec,
        config: RunConfig | None = None,
        reuse: Sequence[StepRecord] = (),
    ) -> WorkflowResult:
        return self.execute(self.prepare(spec), config=config, reuse=reuse)

    def execute(
        self,
        workflow_id: str,
        *,
        config: RunConfig | None = None,
        reuse: Sequence[StepRecord] = (),
    ) -> WorkflowResult:
        """Run a prepared workflow to completion (blocking).

        The stored spec document is authoritative: it is reloaded here so a
        resubmitted workflow behaves identically to its original submission.
        """
        config = config or RunConfig()
        # nested super-templates recurse through the interpreter; size the
        # Python stack to the configured template depth
        sys.setrecursionlimit(
            max(sys.getrecursionlimit(), 10 * config.max_recursion_depth + 1000)
        )
        self.store.write_status(workflow_id, Phase.RUNNING)
        try:
            spec = load_spec_text(self.store.read_spec_text(workflow_id))
            require_valid(spec)
            ctx = _RunContext(self, workflow_id, spec, config, reuse)
            gi = spec.global_inputs
            raw_globals: dict[str, object] = dict(gi.parameter_values)
            raw_globals.update(gi.artifact_values)
            ctx.global_values = typecheck_io(gi.signature(), raw_globals)

            entry = spec.templates[spec.entrypoint]
            root_step = StepDef(
                name=spec.entrypoint,
                template=spec.entrypoint,
                input_bindings={
                    name: WorkflowInputRef(name)
                    for name in entry.inputs.names()
                    if name in ctx.global_values
                },
            )
            root_frame = _Frame(parent_key=None, prefix="steps", inputs={})
            root = self._run_body_step(ctx, root_frame, root_step, stack=())
        except BaseException:
            try:
                self.store.write_status(workflow_id, Phase.FAILED)
            except OpflowError:
                pass
            raise
        phase = (
            Phase.SUCCEEDED if root.phase in OUTPUT_BEARING_PHASES else Phase.FAILED
        )
        self.store.write_status(workflow_id, phase)
        return WorkflowResult(
            workflow_id=workflow_id,
            phase=phase,
            steps=self.store.list_steps(workflow_id),
            executions=ctx.executions,
        )

    def result(self, workflow_id: str) -> WorkflowResult:
        """Read-only snapshot of a workflow's current state."""
        return WorkflowResult(
            workflow_id=workflow_id,
            phase=self.store.read_status(workflow_id),
            steps=self.store.list_steps(workflow_id),
        )

    # -- one body step (group level)

    def _run_body_step(
        self,
        ctx: _RunContext,
        frame: _Frame,
        step: StepDef,
        stack: tuple[str, ...],
    ) -> StepRecord:
        target = ctx.spec.templates[step.template]
        scope = frame.scope(ctx)
        seq = ctx.next_seq()
        generated = derive_child_key(frame.parent_key, step.name)

        key_error: str | None = None
        key: str | None = None
        key_source = "generated"
        per_instance_key = (
            step.key_template is not None
            and step.slices is not None
            and mentions_item(step.key_template)
        )
        if step.key_template is not None and not per_instance_key:
            try:
                rendered = render_placeholders(step.key_template, scope)
                if not is_safe_step_key(rendered):
                    key_error = f"rendered key {rendered!r} is not directory-safe"
                else:
                    key, key_source = rendered, "explicit"
            except OpflowError as exc:
                key_error = f"key_template: {exc}"
        if key is not None:
            try:
                ctx.claim_key(key)
            except DuplicateKey as exc:
                key_error = str(exc)
                key = None
                key_source = "generated"
        if key is None:
            key = ctx.claim_fallback_key(generated, seq)

        record = StepRecord(
            key=key,
            name=step.name,
            template=step.template,
            type_word=step_type_word(target),
            key_source=key_source,
            parent=frame.parent_key,
            seq=seq,
        )
        if isinstance(target, DagTemplate):
            record.dag_edges = infer_dag_dependencies(target)
        ctx.persist(record)

        if key_error is not None:
            return self._finish(ctx, record, Phase.FAILED, Failure("fatal", key_error))

        matched = resolve_reuse(key, ctx.reuse_by_key)
        if matched is not None:
            return self._adopt_reuse(
                ctx, record, matched, group_output_signature(target, step)
            )

        per_instance_when = (
            step.when is not None
            and step.slices is not None
            and mentions_item(step.when)
        )
        if step.when is not None and not per_instance_when:
            try:
                if not evaluate_when(step, scope):
                    record.phase = Phase.SKIPPED
                    ctx.persist(record)
                    return record
            except OpflowError as exc:
                return self._finish(
                    ctx, record, Phase.FAILED, Failure("fatal", f"when: {exc}")
                )

        try:
            raw = self._resolve_bindings(
                ctx, frame, step.input_bindings, group_input_signature(target, step),
                item=_NO_ITEM,
            )
            group_values = typecheck_io(group_input_signature(target, step), raw)
        except OpflowError as exc:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", f"inputs: {exc}")
            )
        record.input_parameters, record.input_artifacts = split_io(group_values)

        if step.slices is None:
            return self._run_instance(
                ctx, frame, step, target, record, group_values, _NO_ITEM, stack
            )
        return self._run_sliced(
            ctx, frame, step, target, record, group_values, stack,
            per_instance_when=per_instance_when,
            per_instance_key=per_instance_key,
        )

    # -- sliced group

    def _run_sliced(
        self,
        ctx: _RunContext,
        frame: _Frame,
        step: StepDef,
        target: OpTemplate,
        record: StepRecord,
        group_values: dict[str, object],
        stack: tuple[str, ...],
        *,
        per_instance_when: bool,
        per_instance_key: bool,
    ) -> StepRecord:
        try:
            instances = expand_slices(step, target, group_values, ctx.storage)
        except OpflowError as exc:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", f"slices: {exc}")
            )
        self._start(ctx, record)

        n = len(instances)
        records: list[StepRecord | None] = [None] * n

        def run_one(instance: SliceInstance) -> StepRecord:
            return self._run_slice_instance(
                ctx, frame, step, target, record, group_values, instance, stack,
                per_instance_when=per_instance_when,
                per_instance_key=per_instance_key,
            )

        if n:
            width = min(
                n,
                ctx.config.parallelism,
                step.slices.parallelism or ctx.config.parallelism,
            )
            if ctx.config.sequential or width == 1:
                for instance in instances:
                    records[instance.index] = run_one(instance)
            else:
                with ThreadPoolExecutor(
                    max_workers=width, thread_name_prefix="opflow-slice"
                ) as pool:
                    futures = [pool.submit(run_one, inst) for inst in instances]
                    for instance, future in zip(instances, futures):
                        records[instance.index] = future.result()

        done: list[StepRecord] = [r for r in records if r is not None]
        phase, message = decide_group_phase(step, [r.phase for r in done])
        if phase is Phase.FAILED:
            return self._finish(ctx, record, phase, Failure("fatal", message or ""))
        try:
            raw = aggregate_slice_outputs(
                step, target, done, ctx.storage,
                f"workflows/{ctx.workflow_id}/{record.key}",
            )
            resolved = typecheck_io(group_output_signature(target, step), raw)
        except OpflowError as exc:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", f"stacked outputs: {exc}")
            )
        record.output_parameters, record.output_artifacts = split_io(resolved)
        return self._finish(ctx, record, Phase.SUCCEEDED, None)

    def _run_slice_instance(
        self,
        ctx: _RunContext,
        frame: _Frame,
        step: StepDef,
        target: OpTemplate,
        group: StepRecord,
        group_values: dict[str, object],
        instance: SliceInstance,
        stack: tuple[str, ...],
        *,
        per_instance_when: bool,
        per_instance_key: bool,
    ) -> StepRecord:
        seq = ctx.next_seq()
        item_scope = item_scope_entries(instance.item)
        generated = f"{group.key}-{instance.index}"

        key_error: str | None = None
        key: str | None = None
        key_source = "explicit" if group.key_source == "explicit" else "generated"
        if per_instance_key:
            scope = dict(frame.scope(ctx))
            scope.update(item_scope)
            try:
                rendered = render_placeholders(step.key_template, scope)
                if not is_safe_step_key(rendered):
                    key_error = f"rendered key {rendered!r} is not directory-safe"
                else:
                    key, key_source = rendered, "explicit"
            except OpflowError as exc:
                key_error = f"key_template: {exc}"
        elif is_safe_step_key(generated):
            key = generated
        else:
            key_error = f"instance key {generated!r} is not directory-safe"
        if key is not None:
            try:
                ctx.claim_key(key)
            except DuplicateKey as exc:
                key_error = str(exc)
                key = None
        if key is None:
            key_source = "generated"
            key = ctx.claim_fallback_key(f"{generated}-alt", seq)

        record = StepRecord(
            key=key,
            name=step.name,
            template=step.template,
            type_word=step_type_word(target),
            key_source=key_source,
            parent=group.key,
            slice_index=instance.index,
            seq=seq,
        )
        if isinstance(target, DagTemplate):
            record.dag_edges = infer_dag_dependencies(target)
        ctx.persist(record)

        if key_error is not None:
            return self._finish(ctx, record, Phase.FAILED, Failure("fatal", key_error))

        matched = resolve_reuse(key, ctx.reuse_by_key)
        if matched is not None:
            return self._adopt_reuse(ctx, record, matched, target.outputs)

        if per_instance_when:
            scope = dict(frame.scope(ctx))
            scope.update(item_scope)
            try:
                if not evaluate_condition(step.when, scope):
                    record.phase = Phase.SKIPPED
                    ctx.persist(record)
                    return record
            except OpflowError as exc:
                return self._finish(
                    ctx, record, Phase.FAILED, Failure("fatal", f"when: {exc}")
                )

        raw: dict[str, object] = dict(group_values)
        raw.update(instance.overrides)
        try:
            for name, ref in step.input_bindings.items():
                if isinstance(ref, (ItemRef, ItemFieldRef)):
                    try:
                        raw[name] = self._resolve_item_ref(ref, instance.item)
                    except UnavailableOutput:
                        if self._slot_has_fallback(target.inputs, name):
                            raw.pop(name, None)
                        else:
                            raise
            values = typecheck_io(target.inputs, raw)
        except OpflowError as exc:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", f"inputs: {exc}")
            )
        record.input_parameters, record.input_artifacts = split_io(values)
        return self._run_instance(
            ctx, frame, step, target, record, values, instance.item, stack
        )

    # -- one concrete instance (sliced or not)

    def _run_instance(
        self,
        ctx: _RunContext,
        frame: _Frame,
        step: StepDef,
        target: OpTemplate,
        record: StepRecord,
        values: dict[str, object],
        item: object,
        stack: tuple[str, ...],
    ) -> StepRecord:
        if isinstance(target, ScriptTemplate):
            return self._run_script(ctx, step, target, record, values, item)
        return self._run_super(ctx, step, target, record, values, stack)

    def _run_super(
        self,
        ctx: _RunContext,
        step: StepDef,
        target: OpTemplate,
        record: StepRecord,
        values: dict[str, object],
        stack: tuple[str, ...],
    ) -> StepRecord:
        try:
            check_recursion_depth(stack, target.name, ctx.config.max_recursion_depth)
        except RecursionLimitExceeded as exc:
            return self._finish(ctx, record, Phase.FAILED, Failure("fatal", str(exc)))
        self._start(ctx, record)
        child = _Frame(
            parent_key=record.key,
            prefix="tasks" if isinstance(target, DagTemplate) else "steps",
            inputs=values,
        )
        child_stack = stack + (target.name,)
        if isinstance(target, StepsTemplate):
            failed, message = self._drive_steps(ctx, child, target, child_stack)
        else:
            failed, message = self._drive_dag(ctx, child, target, child_stack)
        if failed:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", message or "body failed")
            )
        try:
            raw = self._resolve_bindings(
                ctx, child, target.output_bindings, target.outputs, item=_NO_ITEM
            )
            resolved = typecheck_io(target.outputs, raw)
        except OpflowError as exc:
            return self._finish(
                ctx, record, Phase.FAILED, Failure("fatal", f"outputs: {exc}")
            )
        record.output_parameters, record.output_artifacts = split_io(resolved)
        return self._finish(ctx, record, Phase.SUCCEEDED, None)

    # -- body drivers

    def _drive_steps(
        self,
        ctx: _RunContext,
        frame: _Frame,
        template: StepsTemplate,
        stack: tuple[str, ...],
    ) -> tuple[bool, str | None]:
        stopped: str | None = None
        for step in template.body:
            if stopped is not None:
                record = self._make_skipped(ctx, frame, step)
            else:
                record = self._run_body_step(ctx, frame, step, stack)
                if record.phase is Phase.FAILED and not step.continue_on_failed:
                    stopped = self._failure_summary(step.name, record)
            frame.record_result(step.name, record)
        return stopped is not None, stopped

    def _drive_dag(
        self,
        ctx: _RunContext,
        frame: _Frame,
        template: DagTemplate,
        stack: tuple[str, ...],
    ) -> tuple[bool, str | None]:
        body = template.body
        members = {s.name: s for s in body}
        order = {s.name: i for i, s in enumerate(body)}
        edges = infer_dag_dependencies(template)
        indegree = {s.name: 0 for s in body}
        dependents: dict[str, list[str]] = {s.name: [] for s in body}
        for producer, consumer in edges:
            indegree[consumer] += 1
            dependents[producer].append(consumer)

        skip: set[str] = set()
        first_failure: str | None = None
        remaining = len(body)

        def mark_transitive_skip(origin: str) -> None:
            frontier = [origin]
            while frontier:
                node = frontier.pop()
                for dependent in dependents[node]:
                    if dependent not in skip:
                        skip.add(dependent)
                        frontier.append(dependent)

        def on_finished(name: str, record: StepRecord) -> list[str]:
            nonlocal first_failure, remaining
            frame.record_result(name, record)
            remaining -= 1
            if record.phase is Phase.FAILED and not members[name].continue_on_failed:
                if first_failure is None:
                    first_failure = self._failure_summary(name, record)
                mark_transitive_skip(name)
            newly = []
            for dependent in dependents[name]:
                indegree[dependent] -= 1
                if indegree[dependent] == 0:
                    newly.append(dependent)
            newly.sort(key=order.__getitem__)
            return newly

        ready = deque(
            sorted((s.name for s in body if indegree[s.name] == 0), key=order.__getitem__)
        )

        if ctx.config.sequential or len(body) <= 1:
            while ready:
                name = ready.popleft()
                if name in skip:
                    record = self._make_skipped(ctx, frame, members[name])
                else:
                    record = self._run_body_step(ctx, frame, members[name], stack)
                for newly in on_finished(name, record):
                    ready.append(newly)
                ready = deque(sorted(ready, key=order.__getitem__))
            return first_failure is not None, first_failure

        results_q: queue.SimpleQueue = queue.SimpleQueue()

        def worker(name: str) -> None:
            try:
                record = self._run_body_step(ctx, frame, members[name], stack)
            except BaseException as exc:  # engine-level problem; abort the run
                results_q.put((name, None, exc))
                return
            results_q.put((name, record, None))

        pool = ThreadPoolExecutor(
            max_workers=min(ctx.config.parallelism, len(body)),
            thread_name_prefix="opflow-dag",
        )
        inflight = 0
        try:
            while remaining > 0:
                while ready:
                    name = ready.popleft()
                    if name in skip:
                        record = self._make_skipped(ctx, frame, members[name])
                        ready.extend(on_finished(name, record))
                    else:
                        pool.submit(worker, name)
                        inflight += 1
                if remaining == 0:
                    break
                name, record, error = results_q.get()
                inflight -= 1
                if error is not None:
                    raise error
                ready.extend(on_finished(name, record))
        finally:
            pool.shutdown(wait=True, cancel_futures=True)
        return first_failure is not None, first_failure

    @staticmethod
    def _failure_summary(name: str, record: StepRecord) -> str:
        detail = record.failure.message if record.failure else "failed"
        if detail.startswith("step "):
            return detail  # keep the root cause, not the propagation chain
        return f"step {name!r} failed: {detail}"

    def _make_skipped(
        self, ctx: _RunContext, frame: _Frame, step: StepDef
    ) -> StepRecord:
        """Record a step that never ran because an upstream failure cut it off."""
        seq = ctx.next_seq()
        key = ctx.claim_fallback_key(derive_child_key(frame.parent_key, step.name), seq)
        target = ctx.spec.templates[step.template]
        record = StepRecord(
            key=key,
            name=step.name,
            template=step.template,
            type_word=step_type_word(target),
            parent=frame.parent_key,
            seq=seq,
        )
        ctx.persist(record)
        record.phase = Phase.SKIPPED
        ctx.persist(record)
        return record

    # -- script execution

    def _run_script(
        self,
        ctx: _RunContext,
        step: StepDef,
        target: ScriptTemplate,
        record: StepRecord,
        values: dict[str, object],
        item: object,
    ) -> StepRecord:
        executor_name = step.executor or ctx.config.default_executor
        executor = ctx.engine.executors.get(executor_name)
        if executor is None:
            return self._finish(
                ctx,
                record,
                Phase.FAILED,
                Failure("fatal", f"unknown executor {executor_name!r}"),
            )

        record.attempt = 1
        self._start(ctx, record)
        step_dir = ctx.store.step_dir(ctx.workflow_id, record.key)
        workdir = step_dir / "workdir"

        scope = {
            "workflow.name": ParameterValue(ctx.spec.name),
            "workflow.id": ParameterValue(ctx.workflow_id),
        }
        for name, value in values.items():
            if isinstance(value, ParameterValue):
                scope[f"inputs.parameters.{name}"] = value
        scope.update(item_scope_entries(item))

        while True:
            if record.attempt > 1:
                ctx.persist(record)  # Running -> Running carries the new attempt
            try:
                shutil.rmtree(workdir, ignore_errors=True)
                workdir.mkdir(parents=True, exist_ok=True)
                for name, value in values.items():
                    if isinstance(value, ArtifactValue):
                        mount = target.input_artifact_mounts[name]
                        ctx.storage.download(value.location, workdir / mount)
                rendered = replace(
                    target, script=render_placeholders(target.script, scope)
                )
                final = executor.render(rendered)
            except OpflowError as exc:
                return self._finish(
                    ctx, record, Phase.FAILED, Failure("fatal", f"prepare: {exc}")
                )

            with ctx.semaphore:
                ctx.count_execution()
                try:
                    result = ctx.engine.script_runner(
                        final,
                        workdir,
                        inputs=values,
                        timeout=step.timeout_seconds,
                        script_path=step_dir / "script",
                        log_path=step_dir / "log",
                    )
                except OpflowError as exc:
                    return self._finish(
                        ctx, record, Phase.FAILED, Failure("fatal", str(exc))
                    )

            kind = result.kind
            if kind == "success":
                try:
                    raw: dict[str, object] = dict(result.output_parameters or {})
                    for name, path in (result.output_artifacts or {}).items():
                        location = f"workflows/{ctx.workflow_id}/{record.key}/{name}"
                        ctx.storage.upload(path, location)
                        raw[name] = ArtifactValue(location)
                    resolved = typecheck_io(target.outputs, raw)
                except OpflowError as exc:
                    return self._finish(
                        ctx, record, Phase.FAILED, Failure("fatal", f"outputs: {exc}")
                    )
                record.output_parameters, record.output_artifacts = split_io(resolved)
                return self._finish(ctx, record, Phase.SUCCEEDED, None)

            if kind == "timeout":
                failure = Failure(
                    "timeout", f"timed out after {step.timeout_seconds}s"
                )
            else:
                failure = Failure(kind, f"exit code {result.exit_code}")
            decision = apply_fault_policy(step.retry, kind, record.attempt)
            if decision == "retry":
                record.failure = failure
                record.attempt += 1
                if ctx.config.retry_backoff_seconds:
                    ctx.config.clock.sleep(ctx.config.retry_backoff_seconds)
                continue
            return self._finish(ctx, record, Phase.FAILED, failure)

    # -- binding resolution

    def _resolve_bindings(
        self,
        ctx: _RunContext,
        frame: _Frame,
        bindings: Mapping[str, object],
        signature: Signature,
        *,
        item: object,
    ) -> dict[str, object]:
        """Resolve refs against the frame; unavailable sources fall back to
        the slot's default (or drop out when the slot is optional), otherwise
        the error propagates."""
        raw: dict[str, object] = {}
        for name, ref in bindings.items():
            if name not in signature.parameters and name not in signature.artifacts:
                continue  # instance-level slot (item-bound) at the group level
            try:
                raw[name] = self._resolve_ref(ctx, frame, ref, item)
            except UnavailableOutput:
                if self._slot_has_fallback(signature, name):
                    continue
                raise
        return raw

    @staticmethod
    def _slot_has_fallback(signature: Signature, name: str) -> bool:
        if name in signature.parameters:
            spec = signature.parameters[name]
            return spec.optional or spec.default is not None
        if name in signature.artifacts:
            spec = signature.artifacts[name]
            return spec.optional or spec.default_location is not None
        return False

    def _resolve_ref(self, ctx: _RunContext, frame: _Frame, ref, item: object):
        if isinstance(ref, LiteralRef):
            return ref.value
        if isinstance(ref, WorkflowInputRef):
            value = ctx.global_values.get(ref.name)
            if value is None:
                raise UnavailableOutput(f"workflow input {ref.name!r} has no value")
            return value
        if isinstance(ref, TemplateInputRef):
            value = frame.inputs.get(ref.name)
            if value is None:
                raise UnavailableOutput(f"input {ref.name!r} has no value")
            return value
        if isinstance(ref, StepOutputRef):
            with frame.lock:
                record = frame.results.get(ref.step)
            if record is None:
                raise UnavailableOutput(f"step {ref.step!r} has not run")
            if record.phase not in OUTPUT_BEARING_PHASES:
                raise UnavailableOutput(
                    f"step {ref.step!r} is {record.phase.value} and bears no outputs"
                )
            value = record.output_parameters.get(ref.name)
            if value is None:
                value = record.output_artifacts.get(ref.name)
            if value is None:
                raise UnavailableOutput(
                    f"step {ref.step!r} produced no output {ref.name!r}"
                )
            return value
        if isinstance(ref, (ItemRef, ItemFieldRef)):
            return self._resolve_item_ref(ref, item)
        raise UnavailableOutput(f"unsupported value reference {ref!r}")

    @staticmethod
    def _resolve_item_ref(ref, item: object):
        if item is _NO_ITEM:
            raise UnavailableOutput("item is not available here")
        if isinstance(ref, ItemFieldRef):
            if not isinstance(item, dict) or ref.field not in item:
                raise UnavailableOutput(f"item has no field {ref.field!r}")
            return item[ref.field]
        return item

    # -- record lifecycle helpers

    def _start(self, ctx: _RunContext, record: StepRecord) -> None:
        record.phase = Phase.RUNNING
        record.started_at = ctx.now()
        ctx.persist(record)

    def _finish(
        self,
        ctx: _RunContext,
        record: StepRecord,
        phase: Phase,
        failure: Failure | None,
    ) -> StepRecord:
        now = ctx.now()
        if record.phase is Phase.PENDING:
            # the phase machine has no Pending->Failed edge; pass through Running
            record.phase = Phase.RUNNING
            record.started_at = now
            ctx.persist(record)
        record.phase = phase
        record.failure = failure
        record.ended_at = now
        ctx.persist(record)
        return record

    def _adopt_reuse(
        self,
        ctx: _RunContext,
        record: StepRecord,
        matched: StepRecord,
        signature: Signature,
    ) -> StepRecord:
        """Mark the record Reused with the matched record's i/o, or fail fatally
        when those outputs no longer satisfy the template."""
        raw: dict[str, object] = dict(matched.output_parameters)
        raw.update(matched.output_artifacts)
        try:
            resolved = typecheck_io(signature, raw)
        except OpflowError as exc:
            return self._finish(
                ctx,
                record,
                Phase.FAILED,
                Failure(
                    "fatal",
                    f"reuse record {matched.key!r} does not satisfy the current "
                    f"output signature: {exc}",
                ),
            )
        record.input_parameters = dict(matched.input_parameters)
        record.input_artifacts = dict(matched.input_artifacts)
        record.output_parameters, record.output_artifacts = split_io(resolved)
        record.phase = Phase.REUSED
        ctx.persist(record)
        return record
