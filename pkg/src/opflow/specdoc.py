"""Loading and dumping workflow documents (YAML or JSON).

A document carries ``apiVersion: opflow/v1``, a workflow ``name``, an
``entrypoint``, a ``templates`` map, and optional ``global_inputs``.  The
loader is strict: unknown fields are errors, so typos surface at submit time
instead of silently changing behaviour.  ``dump_spec_text`` inverts
``load_spec_text`` up to formatting, which is what lets the state store keep
a replayable copy of every submitted workflow.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml

from .errors import SpecLoadError
from .model import (
    ArtifactSpec,
    ArtifactValue,
    DagTemplate,
    GlobalInputs,
    ItemFieldRef,
    ItemRef,
    LiteralRef,
    OpTemplate,
    ParameterSpec,
    ParameterValue,
    RetryPolicy,
    ScriptTemplate,
    Signature,
    SlicesConfig,
    StepDef,
    StepOutputRef,
    StepsTemplate,
    TemplateInputRef,
    TypeTag,
    ValueRef,
    WorkflowInputRef,
    WorkflowSpec,
    serialize_parameter,
)

API_VERSION = "opflow/v1"


# ---------------------------------------------------------------------------
# Strict access helpers


def _fail(loc: str, message: str) -> SpecLoadError:
    return SpecLoadError(f"{loc}: {message}" if loc else message)


def _as_map(value: Any, loc: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise _fail(loc, f"expected a mapping, got {type(value).__name__}")
    return value


def _as_str(value: Any, loc: str) -> str:
    if not isinstance(value, str):
        raise _fail(loc, f"expected a string, got {type(value).__name__}")
    return value


def _as_bool(value: Any, loc: str) -> bool:
    if not isinstance(value, bool):
        raise _fail(loc, f"expected a bool, got {type(value).__name__}")
    return value


def _as_int(value: Any, loc: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _fail(loc, f"expected an integer, got {value!r}")
    return value


def _as_list(value: Any, loc: str) -> list:
    if value is None:
        return []
    if not isinstance(value, list):
        raise _fail(loc, f"expected a list, got {type(value).__name__}")
    return value


def _as_str_list(value: Any, loc: str) -> tuple[str, ...]:
    return tuple(_as_str(v, f"{loc}[{i}]") for i, v in enumerate(_as_list(value, loc)))


def _as_str_map(value: Any, loc: str) -> dict[str, str]:
    out = {}
    for k, v in _as_map(value, loc).items():
        out[_as_str(k, loc)] = _as_str(v, f"{loc}.{k}")
    return out


def _reject_unknown(doc: dict, allowed: set[str], loc: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise _fail(loc, f"unknown fields: {sorted(unknown)}")


def _type_tag(value: Any, loc: str) -> TypeTag:
    text = _as_str(value, loc)
    try:
        return TypeTag(text)
    except ValueError:
        raise _fail(
            loc, f"unknown type tag {text!r} (expected one of "
            f"{[t.value for t in TypeTag]})"
        ) from None


def _value_text(value: Any, tag: TypeTag, loc: str) -> str:
    """Accept either ready-made text or a native YAML scalar for a value."""
    if isinstance(value, str):
        return value
    try:
        return serialize_parameter(tag, value)
    except Exception as exc:
        raise _fail(loc, str(exc)) from None


# ---------------------------------------------------------------------------
# Signatures


def _load_parameter_spec(doc: Any, loc: str) -> ParameterSpec:
    if isinstance(doc, str):
        return ParameterSpec(type_tag=_type_tag(doc, loc))
    doc = _as_map(doc, loc)
    _reject_unknown(doc, {"type_tag", "optional", "default"}, loc)
    tag = _type_tag(doc.get("type_tag", "string"), f"{loc}.type_tag")
    default = doc.get("default")
    if default is not None:
        default = _value_text(default, tag, f"{loc}.default")
    try:
        return ParameterSpec(
            type_tag=tag,
            optional=_as_bool(doc.get("optional", False), f"{loc}.optional"),
            default=default,
        )
    except Exception as exc:
        raise _fail(loc, str(exc)) from None


def _load_artifact_spec(doc: Any, loc: str) -> ArtifactSpec:
    doc = _as_map(doc, loc)
    _reject_unknown(doc, {"optional", "default_location"}, loc)
    default_location = doc.get("default_location")
    if default_location is not None:
        default_location = _as_str(default_location, f"{loc}.default_location")
    return ArtifactSpec(
        optional=_as_bool(doc.get("optional", False), f"{loc}.optional"),
        default_location=default_location,
    )


def _load_signature(doc: Any, loc: str) -> Signature:
    doc = _as_map(doc, loc)
    _reject_unknown(doc, {"parameters", "artifacts"}, loc)
    parameters = {
        _as_str(name, f"{loc}.parameters"): _load_parameter_spec(
            spec, f"{loc}.parameters.{name}"
        )
        for name, spec in _as_map(doc.get("parameters"), f"{loc}.parameters").items()
    }
    artifacts = {
        _as_str(name, f"{loc}.artifacts"): _load_artifact_spec(
            spec, f"{loc}.artifacts.{name}"
        )
        for name, spec in _as_map(doc.get("artifacts"), f"{loc}.artifacts").items()
    }
    try:
        return Signature(parameters=parameters, artifacts=artifacts)
    except Exception as exc:
        raise _fail(loc, str(exc)) from None


def _dump_signature(sig: Signature) -> dict:
    doc: dict[str, Any] = {}
    if sig.parameters:
        doc["parameters"] = {}
        for name, spec in sig.parameters.items():
            entry: dict[str, Any] = {"type_tag": spec.type_tag.value}
            if spec.optional:
                entry["optional"] = True
            if spec.default is not None:
                entry["default"] = spec.default
            doc["parameters"][name] = entry
    if sig.artifacts:
        doc["artifacts"] = {}
        for name, spec in sig.artifacts.items():
            entry = {}
            if spec.optional:
                entry["optional"] = True
            if spec.default_location is not None:
                entry["default_location"] = spec.default_location
            doc["artifacts"][name] = entry
    return doc


# ---------------------------------------------------------------------------
# Value references


def _load_value_ref(doc: Any, loc: str) -> ValueRef:
    if doc == "item":
        return ItemRef()
    doc = _as_map(doc, loc)
    if len(doc) != 1:
        raise _fail(
            loc,
            "a value reference needs exactly one of: literal, workflow_input, "
            "template_input, step_output, item_field (or the string 'item')",
        )
    ((kind, body),) = doc.items()
    if kind == "literal":
        return LiteralRef(_load_literal(body, f"{loc}.literal"))
    if kind == "workflow_input":
        return WorkflowInputRef(_as_str(body, f"{loc}.workflow_input"))
    if kind == "template_input":
        return TemplateInputRef(_as_str(body, f"{loc}.template_input"))
    if kind == "step_output":
        body = _as_map(body, f"{loc}.step_output")
        _reject_unknown(body, {"step", "name"}, f"{loc}.step_output")
        return StepOutputRef(
            step=_as_str(body.get("step"), f"{loc}.step_output.step"),
            name=_as_str(body.get("name"), f"{loc}.step_output.name"),
        )
    if kind == "item_field":
        return ItemFieldRef(_as_str(body, f"{loc}.item_field"))
    raise _fail(loc, f"unknown value reference kind {kind!r}")


def _load_literal(body: Any, loc: str):
    if isinstance(body, dict) and set(body) <= {"location", "optional"} and "location" in body:
        return ArtifactValue(
            location=_as_str(body["location"], f"{loc}.location"),
            optional=_as_bool(body.get("optional", False), f"{loc}.optional"),
        )
    if isinstance(body, dict) and set(body) == {"text", "type_tag"}:
        tag = _type_tag(body["type_tag"], f"{loc}.type_tag")
        try:
            return ParameterValue(_as_str(body["text"], f"{loc}.text"), tag)
        except Exception as exc:
            raise _fail(loc, str(exc)) from None
    # plain scalar: infer the tag from the YAML native type
    try:
        return ParameterValue.of(body)
    except Exception as exc:
        raise _fail(loc, str(exc)) from None


def _dump_value_ref(ref: ValueRef):
    if isinstance(ref, ItemRef):
        return "item"
    if isinstance(ref, ItemFieldRef):
        return {"item_field": ref.field}
    if isinstance(ref, WorkflowInputRef):
        return {"workflow_input": ref.name}
    if isinstance(ref, TemplateInputRef):
        return {"template_input": ref.name}
    if isinstance(ref, StepOutputRef):
        return {"step_output": {"step": ref.step, "name": ref.name}}
    if isinstance(ref, LiteralRef):
        value = ref.value
        if isinstance(value, ArtifactValue):
            body: dict[str, Any] = {"location": value.location}
            if value.optional:
                body["optional"] = True
            return {"literal": body}
        return {"literal": {"text": value.text, "type_tag": value.type_tag.value}}
    raise TypeError(f"not a ValueRef: {ref!r}")


def _load_bindings(doc: Any, loc: str) -> dict[str, ValueRef]:
    return {
        _as_str(name, loc): _load_value_ref(ref, f"{loc}.{name}")
        for name, ref in _as_map(doc, loc).items()
    }


# ---------------------------------------------------------------------------
# Steps


_STEP_FIELDS = {
    "name",
    "template",
    "input_bindings",
    "when",
    "slices",
    "key_template",
    "retry",
    "timeout_seconds",
    "continue_on_failed",
    "continue_on_success_ratio",
    "continue_on_num_success",
    "executor",
    "dependencies",
}


def _load_step(doc: Any, loc: str) -> StepDef:
    doc = _as_map(doc, loc)
    _reject_unknown(doc, _STEP_FIELDS, loc)
    if "name" not in doc or "template" not in doc:
        raise _fail(loc, "a step needs 'name' and 'template'")

    retry = RetryPolicy()
    if "retry" in doc:
        retry_doc = _as_map(doc["retry"], f"{loc}.retry")
        _reject_unknown(
            retry_doc, {"max_retries_on_transient", "timeout_is_transient"}, f"{loc}.retry"
        )
        retry = RetryPolicy(
            max_retries_on_transient=_as_int(
                retry_doc.get("max_retries_on_transient", 0),
                f"{loc}.retry.max_retries_on_transient",
            ),
            timeout_is_transient=_as_bool(
                retry_doc.get("timeout_is_transient", False),
                f"{loc}.retry.timeout_is_transient",
            ),
        )

    slices = None
    if "slices" in doc:
        slices_doc = _as_map(doc["slices"], f"{loc}.slices")
        _reject_unknown(
            slices_doc, {"sliced_inputs", "stacked_outputs", "parallelism"}, f"{loc}.slices"
        )
        parallelism = slices_doc.get("parallelism")
        if parallelism is not None:
            parallelism = _as_int(parallelism, f"{loc}.slices.parallelism")
        try:
            slices = SlicesConfig(
                sliced_inputs=_as_str_list(
                    slices_doc.get("sliced_inputs"), f"{loc}.slices.sliced_inputs"
                ),
                stacked_outputs=_as_str_list(
                    slices_doc.get("stacked_outputs", []), f"{loc}.slices.stacked_outputs"
                ),
                parallelism=parallelism,
            )
        except ValueError as exc:
            raise _fail(f"{loc}.slices", str(exc)) from None

    timeout = doc.get("timeout_seconds")
    if timeout is not None and (isinstance(timeout, bool) or not isinstance(timeout, (int, float))):
        raise _fail(f"{loc}.timeout_seconds", f"expected a number, got {timeout!r}")
    ratio = doc.get("continue_on_success_ratio")
    if ratio is not None and (isinstance(ratio, bool) or not isinstance(ratio, (int, float))):
        raise _fail(f"{loc}.continue_on_success_ratio", f"expected a number, got {ratio!r}")
    num_success = doc.get("continue_on_num_success")
    if num_success is not None:
        num_success = _as_int(num_success, f"{loc}.continue_on_num_success")
    executor = doc.get("executor")
    if executor is not None:
        executor = _as_str(executor, f"{loc}.executor")
    when = doc.get("when")
    if when is not None:
        when = _as_str(when, f"{loc}.when")
    key_template = doc.get("key_template")
    if key_template is not None:
        key_template = _as_str(key_template, f"{loc}.key_template")

    try:
        return StepDef(
            name=_as_str(doc["name"], f"{loc}.name"),
            template=_as_str(doc["template"], f"{loc}.template"),
            input_bindings=_load_bindings(
                doc.get("input_bindings"), f"{loc}.input_bindings"
            ),
            when=when,
            slices=slices,
            key_template=key_template,
            retry=retry,
            timeout_seconds=float(timeout) if timeout is not None else None,
            continue_on_failed=_as_bool(
                doc.get("continue_on_failed", False), f"{loc}.continue_on_failed"
            ),
            continue_on_success_ratio=float(ratio) if ratio is not None else None,
            continue_on_num_success=num_success,
            executor=executor,
            explicit_dependencies=_as_str_list(
                doc.get("dependencies", []), f"{loc}.dependencies"
            ),
        )
    except ValueError as exc:
        raise _fail(loc, str(exc)) from None


def _dump_step(step: StepDef) -> dict:
    doc: dict[str, Any] = {"name": step.name, "template": step.template}
    if step.input_bindings:
        doc["input_bindings"] = {
            name: _dump_value_ref(ref) for name, ref in step.input_bindings.items()
        }
    if step.when is not None:
        doc["when"] = step.when
    if step.slices is not None:
        slices: dict[str, Any] = {"sliced_inputs": list(step.slices.sliced_inputs)}
        if step.slices.stacked_outputs:
            slices["stacked_outputs"] = list(step.slices.stacked_outputs)
        if step.slices.parallelism is not None:
            slices["parallelism"] = step.slices.parallelism
        doc["slices"] = slices
    if step.key_template is not None:
        doc["key_template"] = step.key_template
    if step.retry != RetryPolicy():
        doc["retry"] = {
            "max_retries_on_transient": step.retry.max_retries_on_transient,
            "timeout_is_transient": step.retry.timeout_is_transient,
        }
    if step.timeout_seconds is not None:
        doc["timeout_seconds"] = step.timeout_seconds
    if step.continue_on_failed:
        doc["continue_on_failed"] = True
    if step.continue_on_success_ratio is not None:
        doc["continue_on_success_ratio"] = step.continue_on_success_ratio
    if step.continue_on_num_success is not None:
        doc["continue_on_num_success"] = step.continue_on_num_success
    if step.executor is not None:
        doc["executor"] = step.executor
    if step.explicit_dependencies:
        doc["dependencies"] = list(step.explicit_dependencies)
    return doc


# ---------------------------------------------------------------------------
# Templates


def _load_template(name: str, doc: Any, loc: str) -> OpTemplate:
    doc = _as_map(doc, loc)
    kind = _as_str(doc.get("kind", ""), f"{loc}.kind")
    if kind == "script":
        _reject_unknown(
            doc,
            {
                "kind",
                "command",
                "script",
                "image",
                "inputs",
                "outputs",
                "output_parameter_sources",
                "output_artifact_sources",
                "input_artifact_mounts",
            },
            loc,
        )
        command = _as_str_list(doc.get("command"), f"{loc}.command")
        try:
            return ScriptTemplate(
                name=name,
                command=command,
                script=_as_str(doc.get("script", ""), f"{loc}.script"),
                image=_as_str(doc.get("image", ""), f"{loc}.image"),
                inputs=_load_signature(doc.get("inputs"), f"{loc}.inputs"),
                outputs=_load_signature(doc.get("outputs"), f"{loc}.outputs"),
                output_parameter_sources=_as_str_map(
                    doc.get("output_parameter_sources"), f"{loc}.output_parameter_sources"
                ),
                output_artifact_sources=_as_str_map(
                    doc.get("output_artifact_sources"), f"{loc}.output_artifact_sources"
                ),
                input_artifact_mounts=_as_str_map(
                    doc.get("input_artifact_mounts"), f"{loc}.input_artifact_mounts"
                ),
            )
        except ValueError as exc:
            raise _fail(loc, str(exc)) from None
    if kind in ("steps", "dag"):
        _reject_unknown(
            doc, {"kind", "inputs", "outputs", "body", "output_bindings"}, loc
        )
        body = tuple(
            _load_step(step, f"{loc}.body[{i}]")
            for i, step in enumerate(_as_list(doc.get("body"), f"{loc}.body"))
        )
        cls = StepsTemplate if kind == "steps" else DagTemplate
        return cls(
            name=name,
            inputs=_load_signature(doc.get("inputs"), f"{loc}.inputs"),
            outputs=_load_signature(doc.get("outputs"), f"{loc}.outputs"),
            body=body,
            output_bindings=_load_bindings(
                doc.get("output_bindings"), f"{loc}.output_bindings"
            ),
        )
    raise _fail(f"{loc}.kind", f"expected 'script', 'steps', or 'dag', got {kind!r}")


def _dump_template(template: OpTemplate) -> dict:
    if isinstance(template, ScriptTemplate):
        doc: dict[str, Any] = {"kind": "script", "command": list(template.command)}
        if template.script:
            doc["script"] = template.script
        if template.image:
            doc["image"] = template.image
        if template.inputs.names():
            doc["inputs"] = _dump_signature(template.inputs)
        if template.outputs.names():
            doc["outputs"] = _dump_signature(template.outputs)
        if template.output_parameter_sources:
            doc["output_parameter_sources"] = dict(template.output_parameter_sources)
        if template.output_artifact_sources:
            doc["output_artifact_sources"] = dict(template.output_artifact_sources)
        if template.input_artifact_mounts:
            doc["input_artifact_mounts"] = dict(template.input_artifact_mounts)
        return doc
    doc = {"kind": "steps" if isinstance(template, StepsTemplate) else "dag"}
    if template.inputs.names():
        doc["inputs"] = _dump_signature(template.inputs)
    if template.outputs.names():
        doc["outputs"] = _dump_signature(template.outputs)
    doc["body"] = [_dump_step(step) for step in template.body]
    if template.output_bindings:
        doc["output_bindings"] = {
            name: _dump_value_ref(ref) for name, ref in template.output_bindings.items()
        }
    return doc


# ---------------------------------------------------------------------------
# Global inputs


def _load_global_inputs(doc: Any, loc: str) -> GlobalInputs:
    doc = _as_map(doc, loc)
    _reject_unknown(doc, {"parameters", "artifacts"}, loc)
    parameters: dict[str, ParameterSpec] = {}
    parameter_values: dict[str, str] = {}
    for name, entry in _as_map(doc.get("parameters"), f"{loc}.parameters").items():
        entry_loc = f"{loc}.parameters.{name}"
        entry = _as_map(entry, entry_loc)
        _reject_unknown(entry, {"type_tag", "optional", "default", "value"}, entry_loc)
        spec = _load_parameter_spec(
            {k: v for k, v in entry.items() if k != "value"}, entry_loc
        )
        parameters[name] = spec
        if "value" in entry:
            parameter_values[name] = _value_text(
                entry["value"], spec.type_tag, f"{entry_loc}.value"
            )
    artifacts: dict[str, ArtifactSpec] = {}
    artifact_values: dict[str, ArtifactValue] = {}
    for name, entry in _as_map(doc.get("artifacts"), f"{loc}.artifacts").items():
        entry_loc = f"{loc}.artifacts.{name}"
        entry = _as_map(entry, entry_loc)
        _reject_unknown(entry, {"optional", "default_location", "location"}, entry_loc)
        spec = _load_artifact_spec(
            {k: v for k, v in entry.items() if k != "location"}, entry_loc
        )
        artifacts[name] = spec
        if "location" in entry:
            artifact_values[name] = ArtifactValue(
                _as_str(entry["location"], f"{entry_loc}.location"),
                optional=spec.optional,
            )
    return GlobalInputs(
        parameters=parameters,
        artifacts=artifacts,
        parameter_values=parameter_values,
        artifact_values=artifact_values,
    )


def _dump_global_inputs(gi: GlobalInputs) -> dict:
    doc: dict[str, Any] = {}
    if gi.parameters:
        doc["parameters"] = {}
        for name, spec in gi.parameters.items():
            entry: dict[str, Any] = {"type_tag": spec.type_tag.value}
            if spec.optional:
                entry["optional"] = True
            if spec.default is not None:
                entry["default"] = spec.default
            if name in gi.parameter_values:
                entry["value"] = gi.parameter_values[name]
            doc["parameters"][name] = entry
    if gi.artifacts:
        doc["artifacts"] = {}
        for name, spec in gi.artifacts.items():
            entry = {}
            if spec.optional:
                entry["optional"] = True
            if spec.default_location is not None:
                entry["default_location"] = spec.default_location
            if name in gi.artifact_values:
                entry["location"] = gi.artifact_values[name].location
            doc["artifacts"][name] = entry
    return doc


# ---------------------------------------------------------------------------
# Whole documents


def doc_to_spec(doc: Any) -> WorkflowSpec:
    doc = _as_map(doc, "")
    if not doc:
        raise SpecLoadError("empty document")
    _reject_unknown(
        doc, {"apiVersion", "name", "entrypoint", "templates", "global_inputs"}, ""
    )
    version = doc.get("apiVersion")
    if version != API_VERSION:
        raise SpecLoadError(
            f"apiVersion: expected {API_VERSION!r}, got {version!r}"
        )
    if "name" not in doc or "entrypoint" not in doc:
        raise SpecLoadError("a workflow needs 'name' and 'entrypoint'")
    templates_doc = _as_map(doc.get("templates"), "templates")
    if not templates_doc:
        raise SpecLoadError("templates: at least one template is required")
    templates = {
        _as_str(name, "templates"): _load_template(name, body, f"templates.{name}")
        for name, body in templates_doc.items()
    }
    return WorkflowSpec(
        name=_as_str(doc["name"], "name"),
        entrypoint=_as_str(doc["entrypoint"], "entrypoint"),
        templates=templates,
        global_inputs=_load_global_inputs(doc.get("global_inputs"), "global_inputs"),
    )


def spec_to_doc(spec: WorkflowSpec) -> dict:
    doc: dict[str, Any] = {
        "apiVersion": API_VERSION,
        "name": spec.name,
        "entrypoint": spec.entrypoint,
        "templates": {
            name: _dump_template(template) for name, template in spec.templates.items()
        },
    }
    global_inputs = _dump_global_inputs(spec.global_inputs)
    if global_inputs:
        doc["global_inputs"] = global_inputs
    return doc


def load_spec_text(text: str) -> WorkflowSpec:
    """Parse a YAML (or JSON) workflow document; raises SpecLoadError."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecLoadError(f"document is not valid YAML/JSON: {exc}") from None
    return doc_to_spec(doc)


def load_spec_file(path: str | Path) -> WorkflowSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecLoadError(f"cannot read {path}: {exc}") from None
    return load_spec_text(text)


def dump_spec_text(spec: WorkflowSpec) -> str:
    """Serialize a spec so that load_spec_text(dump_spec_text(s)) == s."""
    return yaml.safe_dump(spec_to_doc(spec), sort_keys=False, allow_unicode=True)
