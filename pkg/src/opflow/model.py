"""Core domain types: typed values, signatures, templates, and specs.

Parameters travel as text plus a type tag; artifacts travel as storage
locations.  Everything here is an immutable value object with no behaviour
beyond parsing, serialization, and the signature check in
:func:`typecheck_io`.  Scheduling and persistence live elsewhere.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Union

from .errors import (
    MissingInput,
    ParameterTooLarge,
    TypeMismatch,
    UnknownKey,
)

# Parameter text is capped so state-store files stay reviewable; large data
# belongs in artifacts.
PARAMETER_TEXT_LIMIT = 1 << 20

# Names for workflows, templates, steps, parameters, and artifacts.
IDENTIFIER_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]{0,127}$")

_INT_RE = re.compile(r"^[+-]?[0-9]+$")


def is_identifier(name: object) -> bool:
    return isinstance(name, str) and IDENTIFIER_RE.match(name) is not None


class TypeTag(str, Enum):
    """Wire type of a parameter value."""

    STRING = "string"
    INT = "int"
    FLOAT = "float"
    BOOL = "bool"
    JSON = "json"


class Phase(str, Enum):
    """Lifecycle phase of a step (and, for a subset, of a workflow)."""

    PENDING = "Pending"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    SKIPPED = "Skipped"
    REUSED = "Reused"


TERMINAL_PHASES = frozenset(
    {Phase.SUCCEEDED, Phase.FAILED, Phase.SKIPPED, Phase.REUSED}
)

# Phases whose outputs may feed downstream consumers.
OUTPUT_BEARING_PHASES = frozenset({Phase.SUCCEEDED, Phase.REUSED})

LEGAL_PHASE_TRANSITIONS: dict[Phase, frozenset[Phase]] = {
    Phase.PENDING: frozenset({Phase.RUNNING, Phase.SKIPPED, Phase.REUSED}),
    Phase.RUNNING: frozenset({Phase.RUNNING, Phase.SUCCEEDED, Phase.FAILED}),
    Phase.SUCCEEDED: frozenset(),
    Phase.FAILED: frozenset(),
    Phase.SKIPPED: frozenset(),
    Phase.REUSED: frozenset(),
}


def is_legal_transition(current: Phase, new: Phase) -> bool:
    """Rewriting the same phase is always legal; persistence is idempotent."""
    return new == current or new in LEGAL_PHASE_TRANSITIONS[current]


# ---------------------------------------------------------------------------
# Parameter text <-> native values


def parse_parameter(tag: TypeTag, text: str):
    """Parse canonical-or-loose text into a native value for ``tag``.

    Raises TypeMismatch when the text does not parse.  Whitespace padding is
    rejected for numeric and bool tags so values stay unambiguous on disk.
    """
    if not isinstance(text, str):
        raise TypeMismatch(f"parameter text must be str, got {type(text).__name__}")
    if tag is TypeTag.STRING:
        return text
    if tag is TypeTag.INT:
        if not _INT_RE.match(text):
            raise TypeMismatch(f"not an int: {text!r}")
        return int(text)
    if tag is TypeTag.FLOAT:
        if text != text.strip() or text == "":
            raise TypeMismatch(f"not a float: {text!r}")
        try:
            return float(text)
        except ValueError:
            raise TypeMismatch(f"not a float: {text!r}") from None
    if tag is TypeTag.BOOL:
        if text == "true":
            return True
        if text == "false":
            return False
        raise TypeMismatch(f"not a bool (expected 'true' or 'false'): {text!r}")
    if tag is TypeTag.JSON:
        try:
            return json.loads(text)
        except ValueError as exc:
            raise TypeMismatch(f"not valid JSON: {exc}") from None
    raise TypeMismatch(f"unknown type tag {tag!r}")


def serialize_parameter(tag: TypeTag, value) -> str:
    """Serialize a native value into canonical text for ``tag``.

    Canonical text always parses back to an equal value, and canonicalizing
    twice is a no-op.
    """
    if tag is TypeTag.STRING:
        if not isinstance(value, str):
            raise TypeMismatch(
                f"string parameter expects str, got {type(value).__name__}"
            )
        return value
    if tag is TypeTag.INT:
        # bool is an int subclass; reject it so flags cannot masquerade as counts
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"int parameter expects int, got {value!r}")
        return str(value)
    if tag is TypeTag.FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"float parameter expects a number, got {value!r}")
        return repr(float(value))
    if tag is TypeTag.BOOL:
        if not isinstance(value, bool):
            raise TypeMismatch(f"bool parameter expects bool, got {value!r}")
        return "true" if value else "false"
    if tag is TypeTag.JSON:
        try:
            return json.dumps(value, separators=(",", ":"))
        except (TypeError, ValueError) as exc:
            raise TypeMismatch(f"not JSON-serializable: {exc}") from None
    raise TypeMismatch(f"unknown type tag {tag!r}")


def canonical_text(tag: TypeTag, text: str) -> str:
    return serialize_parameter(tag, parse_parameter(tag, text))


@dataclass(frozen=True)
class ParameterValue:
    """A parameter as it travels between steps: text plus a type tag.

    Construction verifies that the text parses under the tag and respects the
    size ceiling; the text itself is preserved as given (canonicalization
    happens at signature boundaries in :func:`typecheck_io`).
    """

    text: str
    type_tag: TypeTag = TypeTag.STRING

    def __post_init__(self) -> None:
        if not isinstance(self.text, str):
            raise TypeMismatch(
                f"parameter text must be str, got {type(self.text).__name__}"
            )
        if len(self.text.encode("utf-8")) > PARAMETER_TEXT_LIMIT:
            raise ParameterTooLarge(
                f"parameter text exceeds {PARAMETER_TEXT_LIMIT} bytes"
            )
        parse_parameter(self.type_tag, self.text)

    @property
    def value(self):
        """The parsed native view of the text."""
        return parse_parameter(self.type_tag, self.text)

    @classmethod
    def of(cls, value, tag: TypeTag | None = None) -> "ParameterValue":
        """Build a canonical ParameterValue from a native Python value."""
        if tag is None:
            tag = infer_type_tag(value)
        return cls(serialize_parameter(tag, value), tag)


def infer_type_tag(value) -> TypeTag:
    if isinstance(value, bool):
        return TypeTag.BOOL
    if isinstance(value, int):
        return TypeTag.INT
    if isinstance(value, float):
        return TypeTag.FLOAT
    if isinstance(value, str):
        return TypeTag.STRING
    return TypeTag.JSON


@dataclass(frozen=True)
class ArtifactValue:
    """An artifact as it travels between steps: a storage location."""

    location: str
    optional: bool = False


@dataclass(frozen=True)
class ParameterSpec:
    """Declared slot for one parameter in a signature."""

    type_tag: TypeTag = TypeTag.STRING
    optional: bool = False
    default: str | None = None

    def __post_init__(self) -> None:
        if self.default is not None:
            # defaults must already be well-typed text
            parse_parameter(self.type_tag, self.default)


@dataclass(frozen=True)
class ArtifactSpec:
    """Declared slot for one artifact in a signature."""

    optional: bool = False
    default_location: str | None = None


@dataclass(frozen=True)
class Signature:
    """Ordered, named parameter and artifact slots of a template side."""

    parameters: dict[str, ParameterSpec] = field(default_factory=dict)
    artifacts: dict[str, ArtifactSpec] = field(default_factory=dict)

    def __post_init__(self) -> None:
        overlap = set(self.parameters) & set(self.artifacts)
        if overlap:
            raise TypeMismatch(
                f"names declared as both parameter and artifact: {sorted(overlap)}"
            )

    def names(self) -> list[str]:
        return list(self.parameters) + list(self.artifacts)


# ---------------------------------------------------------------------------
# Value references (how step inputs and template outputs are bound)


@dataclass(frozen=True)
class LiteralRef:
    value: Union[ParameterValue, ArtifactValue]

    def __post_init__(self) -> None:
        # accept native Python values from specs built in code
        if not isinstance(self.value, (ParameterValue, ArtifactValue)):
            object.__setattr__(self, "value", ParameterValue.of(self.value))


@dataclass(frozen=True)
class WorkflowInputRef:
    name: str


@dataclass(frozen=True)
class TemplateInputRef:
    name: str


@dataclass(frozen=True)
class StepOutputRef:
    step: str
    name: str


@dataclass(frozen=True)
class ItemRef:
    """The current slice element (only valid inside a sliced step)."""


@dataclass(frozen=True)
class ItemFieldRef:
    """A field of the current slice element when elements are objects."""

    field: str


ValueRef = Union[
    LiteralRef, WorkflowInputRef, TemplateInputRef, StepOutputRef, ItemRef, ItemFieldRef
]


# ---------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class RetryPolicy:
    max_retries_on_transient: int = 0
    timeout_is_transient: bool = False

    def __post_init__(self) -> None:
        if self.max_retries_on_transient < 0:
            raise ValueError("max_retries_on_transient must be >= 0")


@dataclass(frozen=True)
class SlicesConfig:
    """Fan a step out over list-shaped inputs and stack selected outputs."""

    sliced_inputs: tuple[str, ...]
    stacked_outputs: tuple[str, ...] = ()
    parallelism: int | None = None

    def __post_init__(self) -> None:
        if not self.sliced_inputs:
            raise ValueError("slices need at least one sliced input")
        if self.parallelism is not None and self.parallelism < 1:
            raise ValueError("slice parallelism must be >= 1")


@dataclass(frozen=True)
class StepDef:
    """One invocation of a template inside a Steps or DAG body.

    ``explicit_dependencies`` is only meaningful inside DAG bodies, where it
    adds ordering edges beyond the inferred data edges.
    """

    name: str
    template: str
    input_bindings: dict[str, ValueRef] = field(default_factory=dict)
    when: str | None = None
    slices: SlicesConfig | None = None
    key_template: str | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_seconds: float | None = None
    continue_on_failed: bool = False
    continue_on_success_ratio: float | None = None
    continue_on_num_success: int | None = None
    executor: str | None = None
    explicit_dependencies: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.timeout_seconds is not None and self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        ratio = self.continue_on_success_ratio
        if ratio is not None and not (0.0 < ratio <= 1.0):
            raise ValueError("continue_on_success_ratio must be in (0, 1]")
        num = self.continue_on_num_success
        if num is not None and num < 0:
            raise ValueError("continue_on_num_success must be >= 0")


# ---------------------------------------------------------------------------
# Templates


@dataclass(frozen=True)
class ScriptTemplate:
    """A leaf operation: a script run by a command in a scratch directory."""

    name: str
    command: tuple[str, ...]
    script: str
    inputs: Signature = field(default_factory=Signature)
    outputs: Signature = field(default_factory=Signature)
    # output parameter name -> file path (relative to the workdir) read after exit 0
    output_parameter_sources: dict[str, str] = field(default_factory=dict)
    # output artifact name -> path (relative to the workdir) collected after exit 0
    output_artifact_sources: dict[str, str] = field(default_factory=dict)
    # input artifact name -> path (relative to the workdir) it is materialized at
    input_artifact_mounts: dict[str, str] = field(default_factory=dict)
    image: str = ""

    def __post_init__(self) -> None:
        if not self.command:
            raise ValueError(f"template {self.name!r} has an empty command")


@dataclass(frozen=True)
class StepsTemplate:
    """A super-operation whose body runs as sequential phases."""

    name: str
    body: tuple[StepDef, ...]
    inputs: Signature = field(default_factory=Signature)
    outputs: Signature = field(default_factory=Signature)
    output_bindings: dict[str, ValueRef] = field(default_factory=dict)


@dataclass(frozen=True)
class DagTemplate:
    """A super-operation whose body runs as a dependency graph."""

    name: str
    body: tuple[StepDef, ...]
    inputs: Signature = field(default_factory=Signature)
    outputs: Signature = field(default_factory=Signature)
    output_bindings: dict[str, ValueRef] = field(default_factory=dict)


OpTemplate = Union[ScriptTemplate, StepsTemplate, DagTemplate]

# Word stored in each step directory's ``type`` file.
STEP_TYPE_WORDS = {
    ScriptTemplate: "Pod",
    StepsTemplate: "Steps",
    DagTemplate: "DAG",
}


def step_type_word(template: OpTemplate) -> str:
    return STEP_TYPE_WORDS[type(template)]


@dataclass(frozen=True)
class GlobalInputs:
    """Workflow-level inputs: declared slots plus values bound in the spec."""

    parameters: dict[str, ParameterSpec] = field(default_factory=dict)
    artifacts: dict[str, ArtifactSpec] = field(default_factory=dict)
    parameter_values: dict[str, str] = field(default_factory=dict)
    artifact_values: dict[str, ArtifactValue] = field(default_factory=dict)

    def signature(self) -> Signature:
        return Signature(parameters=dict(self.parameters), artifacts=dict(self.artifacts))


@dataclass(frozen=True)
class WorkflowSpec:
    """A complete workflow document: templates plus an entrypoint."""

    name: str
    templates: dict[str, OpTemplate]
    entrypoint: str
    global_inputs: GlobalInputs = field(default_factory=GlobalInputs)


# ---------------------------------------------------------------------------
# Signature checking


def typecheck_io(signature: Signature, values: Mapping[str, object]) -> dict[str, object]:
    """Check ``values`` against ``signature`` and return the resolved mapping.

    Parameters come back as canonical :class:`ParameterValue` and artifacts as
    :class:`ArtifactValue`, in signature order.  Accepted inputs per slot:
    raw text (parsed under the slot's tag), a ParameterValue (its text is
    re-parsed under the slot's tag), or a native Python value.  Missing slots
    take their default; optional slots without a default are omitted from the
    result.  The function is idempotent: feeding its result back in returns an
    equal mapping.

    Raises MissingInput, UnknownKey, or TypeMismatch.
    """
    resolved: dict[str, object] = {}
    for name, spec in signature.parameters.items():
        if name in values:
            supplied = values[name]
            if isinstance(supplied, ArtifactValue):
                raise TypeMismatch(f"parameter {name!r} received an artifact value")
            if isinstance(supplied, ParameterValue):
                text = supplied.text
            elif isinstance(supplied, str):
                text = supplied
            else:
                text = serialize_parameter(spec.type_tag, supplied)
            try:
                resolved[name] = ParameterValue(
                    canonical_text(spec.type_tag, text), spec.type_tag
                )
            except TypeMismatch as exc:
                raise TypeMismatch(f"parameter {name!r}: {exc}") from None
        elif spec.default is not None:
            resolved[name] = ParameterValue(
                canonical_text(spec.type_tag, spec.default), spec.type_tag
            )
        elif spec.optional:
            continue
        else:
            raise MissingInput(f"missing required parameter {name!r}")

    for name, spec in signature.artifacts.items():
        if name in values:
            supplied = values[name]
            if isinstance(supplied, ArtifactValue):
                location = supplied.location
            elif isinstance(supplied, str):
                location = supplied
            else:
                raise TypeMismatch(
                    f"artifact {name!r} expects a location, got {type(supplied).__name__}"
                )
            if not location:
                if spec.optional:
                    continue
                raise MissingInput(f"artifact {name!r} has an empty location")
            resolved[name] = ArtifactValue(location, optional=spec.optional)
        elif spec.default_location is not None:
            resolved[name] = ArtifactValue(spec.default_location, optional=spec.optional)
        elif spec.optional:
            continue
        else:
            raise MissingInput(f"missing required artifact {name!r}")

    extras = set(values) - set(signature.parameters) - set(signature.artifacts)
    if extras:
        raise UnknownKey(f"values supplied for undeclared names: {sorted(extras)}")
    return resolved


def split_io(resolved: Mapping[str, object]) -> tuple[dict[str, ParameterValue], dict[str, ArtifactValue]]:
    """Split a typecheck_io result into (parameters, artifacts)."""
    params: dict[str, ParameterValue] = {}
    arts: dict[str, ArtifactValue] = {}
    for name, value in resolved.items():
        if isinstance(value, ParameterValue):
            params[name] = value
        elif isinstance(value, ArtifactValue):
            arts[name] = value
        else:  # pragma: no cover - typecheck_io never yields anything else
            raise TypeMismatch(f"unexpected resolved value for {name!r}")
    return params, arts


def float_equal(a: float, b: float, rel: float = 1e-9) -> bool:
    """Equality helper for float parameters surviving a text round trip."""
    return math.isclose(a, b, rel_tol=rel, abs_tol=0.0)


# ---------------------------------------------------------------------------
# Execution records


FAILURE_TRANSIENT = "transient"
FAILURE_FATAL = "fatal"
FAILURE_TIMEOUT = "timeout"


@dataclass(frozen=True)
class Failure:
    """Why a step failed; ``kind`` drives the retry policy."""

    kind: str  # transient | fatal | timeout
    message: str = ""

    def __post_init__(self) -> None:
        if self.kind not in (FAILURE_TRANSIENT, FAILURE_FATAL, FAILURE_TIMEOUT):
            raise ValueError(f"unknown failure kind {self.kind!r}")


@dataclass
class StepRecord:
    """Persisted execution state of one step instance.

    ``key`` doubles as the step's directory name in the workflow dir: the
    resolved key_template when one was given (``key_source == "explicit"``),
    otherwise the instantiation path joined by ``--`` (slice instances append
    ``-<index>``), which keeps generated keys deterministic across runs.
    ``seq`` preserves creation order for listings.
    """

    key: str
    name: str
    template: str
    type_word: str  # Pod | Steps | DAG
    phase: Phase = Phase.PENDING
    attempt: int = 0
    key_source: str = "generated"  # explicit | generated
    input_parameters: dict[str, ParameterValue] = field(default_factory=dict)
    input_artifacts: dict[str, ArtifactValue] = field(default_factory=dict)
    output_parameters: dict[str, ParameterValue] = field(default_factory=dict)
    output_artifacts: dict[str, ArtifactValue] = field(default_factory=dict)
    parent: str | None = None
    slice_index: int | None = None
    seq: int = 0
    started_at: float | None = None
    ended_at: float | None = None
    failure: Failure | None = None
    dag_edges: tuple[tuple[str, str], ...] | None = None

    @property
    def duration(self) -> float | None:
        if self.started_at is None or self.ended_at is None:
            return None
        return self.ended_at - self.started_at
