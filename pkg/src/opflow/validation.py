"""Static validation: reference resolution, type compatibility, acyclicity.

``validate_workflow`` returns a report of diagnostics instead of raising, so
callers can show every problem at once.  Diagnostics with severity ``error``
make the engine refuse the spec; ``warning`` diagnostics (for example a
recursive step without a break condition) never block execution, they flag
specs that may only terminate through the recursion depth limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UnresolvedReference, ValidationFailed
from .expr import iter_placeholder_paths
from .model import (
    ArtifactValue,
    DagTemplate,
    ItemFieldRef,
    ItemRef,
    LiteralRef,
    OpTemplate,
    ParameterValue,
    ScriptTemplate,
    Signature,
    StepDef,
    StepOutputRef,
    StepsTemplate,
    TemplateInputRef,
    TypeTag,
    ValueRef,
    WorkflowInputRef,
    WorkflowSpec,
    is_identifier,
    parse_parameter,
)

ERROR = "error"
WARNING = "warning"


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.location}: {self.message}"


@dataclass
class ValidationReport:
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        """True when the spec is accepted (warnings do not block)."""
        return not self.errors()

    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == ERROR]

    def warnings(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == WARNING]

    def __str__(self) -> str:
        if not self.diagnostics:
            return "spec accepted, no diagnostics"
        return "\n".join(str(d) for d in self.diagnostics)


def require_valid(spec: WorkflowSpec) -> ValidationReport:
    """Validate and raise ValidationFailed when the report has errors."""
    report = validate_workflow(spec)
    if not report.ok:
        raise ValidationFailed(report)
    return report


# ---------------------------------------------------------------------------
# Dependency inference and cycle detection


def infer_dag_dependencies(template: DagTemplate) -> tuple[tuple[str, str], ...]:
    """Edges (producer, consumer) implied by bindings, conditions, keys, and
    explicit dependencies; sorted for determinism.

    A ``when`` or ``key_template`` reading ``tasks.<t>.outputs...`` orders the
    step after ``t`` exactly like a data binding does.  Raises
    UnresolvedReference when a referenced producer is not a body member.
    """
    members = {step.name for step in template.body}
    edges: set[tuple[str, str]] = set()
    for step in template.body:
        for ref in step.input_bindings.values():
            if isinstance(ref, StepOutputRef):
                if ref.step not in members:
                    raise UnresolvedReference(
                        f"task {step.name!r} binds from unknown task {ref.step!r}"
                    )
                edges.add((ref.step, step.name))
        for text in (step.when, step.key_template):
            if not text:
                continue
            for path in iter_placeholder_paths(text):
                parts = path.split(".")
                if len(parts) >= 2 and parts[0] == "tasks":
                    if parts[1] not in members:
                        raise UnresolvedReference(
                            f"task {step.name!r} references unknown task {parts[1]!r}"
                        )
                    edges.add((parts[1], step.name))
        for dep in step.explicit_dependencies:
            if dep not in members:
                raise UnresolvedReference(
                    f"task {step.name!r} depends on unknown task {dep!r}"
                )
            edges.add((dep, step.name))
    return tuple(sorted(edges))


def detect_cycles(edges, nodes) -> list[str] | None:
    """Return one witness cycle as a node list (closing edge implied), else None."""
    adjacency: dict[str, list[str]] = {node: [] for node in nodes}
    for producer, consumer in edges:
        adjacency.setdefault(producer, []).append(consumer)
        adjacency.setdefault(consumer, [])
    for neighbors in adjacency.values():
        neighbors.sort()

    WHITE, GREY, BLACK = 0, 1, 2
    color = {node: WHITE for node in adjacency}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = GREY
        stack.append(node)
        for neighbor in adjacency[node]:
            if color[neighbor] == GREY:
                return stack[stack.index(neighbor) :]
            if color[neighbor] == WHITE:
                cycle = visit(neighbor)
                if cycle is not None:
                    return cycle
        stack.pop()
        color[node] = BLACK
        return None

    for node in sorted(adjacency):
        if color[node] == WHITE:
            cycle = visit(node)
            if cycle is not None:
                return list(cycle)
    return None


# ---------------------------------------------------------------------------
# Binding compatibility

# src tag -> dst tags a canonical text is guaranteed to parse under
_WIDENING: dict[TypeTag, frozenset[TypeTag]] = {
    TypeTag.STRING: frozenset({TypeTag.STRING}),
    TypeTag.INT: frozenset({TypeTag.INT, TypeTag.FLOAT, TypeTag.STRING, TypeTag.JSON}),
    TypeTag.FLOAT: frozenset({TypeTag.FLOAT, TypeTag.STRING, TypeTag.JSON}),
    TypeTag.BOOL: frozenset({TypeTag.BOOL, TypeTag.STRING, TypeTag.JSON}),
    TypeTag.JSON: frozenset({TypeTag.JSON, TypeTag.STRING}),
}


def tag_compatible(src: TypeTag, dst: TypeTag) -> bool:
    return dst in _WIDENING[src]


# ---------------------------------------------------------------------------
# validate_workflow


class _Validator:
    def __init__(self, spec: WorkflowSpec) -> None:
        self.spec = spec
        self.diagnostics: list[Diagnostic] = []

    def error(self, location: str, message: str) -> None:
        self.diagnostics.append(Diagnostic(ERROR, location, message))

    def warning(self, location: str, message: str) -> None:
        self.diagnostics.append(Diagnostic(WARNING, location, message))

    # -- entry

    def run(self) -> ValidationReport:
        spec = self.spec
        if not is_identifier(spec.name):
            self.error("name", f"invalid identifier {spec.name!r}")
        if spec.entrypoint not in spec.templates:
            self.error("entrypoint", f"unresolved template {spec.entrypoint!r}")
        self.check_global_inputs()
        for name, template in spec.templates.items():
            loc = f"templates.{name}"
            if not is_identifier(name):
                self.error(loc, f"invalid identifier {name!r}")
            if isinstance(template, ScriptTemplate):
                self.check_script_template(template, loc)
            else:
                self.check_super_template(template, loc)
        self.check_entrypoint_inputs()
        return ValidationReport(self.diagnostics)

    # -- pieces

    def check_global_inputs(self) -> None:
        gi = self.spec.global_inputs
        self.check_signature(gi.signature(), "global_inputs")
        for name, text in gi.parameter_values.items():
            loc = f"global_inputs.parameters.{name}"
            if name not in gi.parameters:
                self.error(loc, "value bound for an undeclared parameter")
                continue
            try:
                parse_parameter(gi.parameters[name].type_tag, text)
            except Exception as exc:
                self.error(loc, str(exc))
        for name in gi.artifact_values:
            if name not in gi.artifacts:
                self.error(
                    f"global_inputs.artifacts.{name}",
                    "location bound for an undeclared artifact",
                )

    def check_entrypoint_inputs(self) -> None:
        entry = self.spec.templates.get(self.spec.entrypoint)
        if entry is None:
            return
        gi = self.spec.global_inputs
        for pname, pspec in entry.inputs.parameters.items():
            if pspec.optional or pspec.default is not None:
                continue
            if pname not in gi.parameters:
                self.error(
                    "global_inputs",
                    f"entrypoint requires parameter {pname!r} but it is not declared",
                )
            elif not tag_compatible(gi.parameters[pname].type_tag, pspec.type_tag):
                self.error(
                    f"global_inputs.parameters.{pname}",
                    f"tag {gi.parameters[pname].type_tag.value} does not feed "
                    f"entrypoint tag {pspec.type_tag.value}",
                )
        for aname, aspec in entry.inputs.artifacts.items():
            if aspec.optional or aspec.default_location is not None:
                continue
            if aname not in gi.artifacts:
                self.error(
                    "global_inputs",
                    f"entrypoint requires artifact {aname!r} but it is not declared",
                )

    def check_signature(self, sig: Signature, loc: str) -> None:
        for name in sig.names():
            if not is_identifier(name):
                self.error(loc, f"invalid identifier {name!r}")

    def check_script_template(self, template: ScriptTemplate, loc: str) -> None:
        self.check_signature(template.inputs, f"{loc}.inputs")
        self.check_signature(template.outputs, f"{loc}.outputs")

        declared_params = set(template.outputs.parameters)
        sourced_params = set(template.output_parameter_sources)
        for name in sorted(declared_params - sourced_params):
            self.error(loc, f"output parameter {name!r} has no source path")
        for name in sorted(sourced_params - declared_params):
            self.error(loc, f"output_parameter_sources names undeclared output {name!r}")

        declared_arts = set(template.outputs.artifacts)
        sourced_arts = set(template.output_artifact_sources)
        for name in sorted(declared_arts - sourced_arts):
            self.error(loc, f"output artifact {name!r} has no source path")
        for name in sorted(sourced_arts - declared_arts):
            self.error(loc, f"output_artifact_sources names undeclared output {name!r}")

        declared_ins = set(template.inputs.artifacts)
        mounted = set(template.input_artifact_mounts)
        for name in sorted(declared_ins - mounted):
            self.error(loc, f"input artifact {name!r} has no mount path")
        for name in sorted(mounted - declared_ins):
            self.error(loc, f"input_artifact_mounts names undeclared artifact {name!r}")

        paths = list(template.input_artifact_mounts.values())
        if len(set(paths)) != len(paths):
            self.error(loc, "input artifact mount paths are not distinct")
        for kind, mapping in (
            ("mount", template.input_artifact_mounts),
            ("output artifact", template.output_artifact_sources),
            ("output parameter", template.output_parameter_sources),
        ):
            for name, path in mapping.items():
                if path.startswith("/") or ".." in path.split("/") or not path:
                    self.error(
                        loc, f"{kind} path for {name!r} must be relative without '..'"
                    )

        for path in iter_placeholder_paths(template.script):
            if not self._script_path_ok(path, template):
                self.error(
                    loc, f"script references unknown placeholder {{{{{path}}}}}"
                )

    @staticmethod
    def _script_path_ok(path: str, template: ScriptTemplate) -> bool:
        parts = path.split(".")
        if parts[0] == "workflow" and len(parts) == 2 and parts[1] in ("name", "id"):
            return True
        if parts[0] == "item":
            return len(parts) <= 2
        if len(parts) == 3 and parts[:2] == ["inputs", "parameters"]:
            return parts[2] in template.inputs.parameters
        return False

    def check_super_template(self, template, loc: str) -> None:
        self.check_signature(template.inputs, f"{loc}.inputs")
        self.check_signature(template.outputs, f"{loc}.outputs")
        is_dag = isinstance(template, DagTemplate)
        members: dict[str, StepDef] = {}
        seen: set[str] = set()
        for i, step in enumerate(template.body):
            if step.name in seen:
                self.error(f"{loc}.body[{i}]", f"duplicate step name {step.name!r}")
            seen.add(step.name)
        members = {step.name: step for step in template.body}

        for i, step in enumerate(template.body):
            self.check_step(template, step, i, members, is_dag, f"{loc}.body[{i}]")

        self.check_output_bindings(template, members, loc)

        if is_dag:
            try:
                edges = infer_dag_dependencies(template)
            except UnresolvedReference:
                return  # per-step diagnostics already cover the dangling names
            cycle = detect_cycles(edges, [s.name for s in template.body])
            if cycle is not None:
                self.error(loc, f"dependency cycle: {' -> '.join(cycle)}")

    def check_step(
        self,
        template,
        step: StepDef,
        index: int,
        members: dict[str, StepDef],
        is_dag: bool,
        loc: str,
    ) -> None:
        spec = self.spec
        if not is_identifier(step.name):
            self.error(loc, f"invalid identifier {step.name!r}")
        target = spec.templates.get(step.template)
        if target is None:
            self.error(loc, f"unresolved template {step.template!r}")
        if step.explicit_dependencies and not is_dag:
            self.error(loc, "dependencies are only valid in DAG bodies")
        for dep in step.explicit_dependencies:
            if dep not in members:
                self.error(loc, f"unknown dependency {dep!r}")
            elif dep == step.name:
                self.error(loc, "a task cannot depend on itself")

        if (
            step.continue_on_success_ratio is not None
            or step.continue_on_num_success is not None
        ) and step.slices is None:
            self.error(loc, "success-count continuation requires slices")
        if (
            step.continue_on_success_ratio is not None
            and step.continue_on_num_success is not None
        ):
            self.error(
                loc,
                "continue_on_success_ratio and continue_on_num_success are exclusive",
            )

        if target is not None and step.timeout_seconds is not None:
            if not isinstance(target, ScriptTemplate):
                self.warning(
                    loc, "timeout_seconds has no effect on steps/dag templates"
                )

        if step.slices is not None and target is not None:
            for name in step.slices.sliced_inputs:
                if name not in target.inputs.parameters and name not in target.inputs.artifacts:
                    self.error(
                        f"{loc}.slices",
                        f"sliced input {name!r} is not an input of {step.template!r}",
                    )
            for name in step.slices.stacked_outputs:
                if name not in target.outputs.parameters and name not in target.outputs.artifacts:
                    self.error(
                        f"{loc}.slices",
                        f"stacked output {name!r} is not an output of {step.template!r}",
                    )

        # recursion must be reachable only through a conditional step
        if target is not None and step.when is None:
            if template.name in self._reachable_templates(step.template):
                self.warning(
                    loc,
                    f"recursive step (via {step.template!r}) has no 'when' condition; "
                    "it can only stop at the recursion depth limit",
                )

        if target is not None:
            self.check_bindings(template, step, index, members, is_dag, target, loc)

        for attr in ("when", "key_template"):
            text = getattr(step, attr)
            if text is None:
                continue
            for path in iter_placeholder_paths(text):
                problem = self._classify_body_path(
                    path, template, step, index, members, is_dag
                )
                if problem:
                    self.error(f"{loc}.{attr}", problem)

    def check_bindings(
        self,
        template,
        step: StepDef,
        index: int,
        members: dict[str, StepDef],
        is_dag: bool,
        target,
        loc: str,
    ) -> None:
        input_params = target.inputs.parameters
        input_arts = target.inputs.artifacts
        for name, ref in step.input_bindings.items():
            ref_loc = f"{loc}.input_bindings.{name}"
            if name not in input_params and name not in input_arts:
                self.error(
                    ref_loc, f"{step.template!r} declares no input named {name!r}"
                )
                continue
            is_param_slot = name in input_params
            sliced = step.slices is not None and name in step.slices.sliced_inputs
            dst_tag = input_params[name].type_tag if is_param_slot else None
            # a sliced parameter slot receives a json list at the group level
            if sliced and is_param_slot:
                dst_tag = TypeTag.JSON
            self.check_ref(
                ref, template, step, index, members, is_dag,
                is_param_slot, dst_tag, ref_loc,
            )

        # unbound required inputs
        for pname, pspec in input_params.items():
            if pname in step.input_bindings or pspec.optional or pspec.default is not None:
                continue
            self.error(loc, f"required input parameter {pname!r} is not bound")
        for aname, aspec in input_arts.items():
            if (
                aname in step.input_bindings
                or aspec.optional
                or aspec.default_location is not None
            ):
                continue
            self.error(loc, f"required input artifact {aname!r} is not bound")

    def check_ref(
        self,
        ref: ValueRef,
        template,
        step: StepDef,
        index: int,
        members: dict[str, StepDef],
        is_dag: bool,
        is_param_slot: bool,
        dst_tag: TypeTag | None,
        loc: str,
    ) -> None:
        spec = self.spec
        if isinstance(ref, LiteralRef):
            if isinstance(ref.value, ParameterValue) and not is_param_slot:
                self.error(loc, "parameter literal bound to an artifact input")
            elif isinstance(ref.value, ArtifactValue) and is_param_slot:
                self.error(loc, "artifact literal bound to a parameter input")
            elif is_param_slot and dst_tag is not None:
                try:
                    parse_parameter(dst_tag, ref.value.text)
                except Exception:
                    self.error(
                        loc,
                        f"literal {ref.value.text!r} does not parse as {dst_tag.value}",
                    )
        elif isinstance(ref, WorkflowInputRef):
            gi = spec.global_inputs
            if ref.name in gi.parameters:
                if not is_param_slot:
                    self.error(loc, "workflow parameter bound to an artifact input")
                elif dst_tag is not None and not tag_compatible(
                    gi.parameters[ref.name].type_tag, dst_tag
                ):
                    self.error(
                        loc,
                        f"workflow parameter {ref.name!r} "
                        f"({gi.parameters[ref.name].type_tag.value}) does not feed "
                        f"tag {dst_tag.value}",
                    )
            elif ref.name in gi.artifacts:
                if is_param_slot:
                    self.error(loc, "workflow artifact bound to a parameter input")
            else:
                self.error(loc, f"unresolved workflow input {ref.name!r}")
        elif isinstance(ref, TemplateInputRef):
            if ref.name in template.inputs.parameters:
                if not is_param_slot:
                    self.error(loc, "parameter input bound to an artifact input")
                elif dst_tag is not None and not tag_compatible(
                    template.inputs.parameters[ref.name].type_tag, dst_tag
                ):
                    self.error(
                        loc,
                        f"input {ref.name!r} "
                        f"({template.inputs.parameters[ref.name].type_tag.value}) "
                        f"does not feed tag {dst_tag.value}",
                    )
            elif ref.name in template.inputs.artifacts:
                if is_param_slot:
                    self.error(loc, "artifact input bound to a parameter input")
            else:
                self.error(
                    loc, f"{template.name!r} declares no input named {ref.name!r}"
                )
        elif isinstance(ref, StepOutputRef):
            member = members.get(ref.step)
            if member is None:
                word = "task" if is_dag else "step"
                self.error(loc, f"unresolved {word} {ref.step!r}")
                return
            if not is_dag:
                order = [s.name for s in template.body]
                if order.index(ref.step) >= index:
                    self.error(
                        loc,
                        f"steps may only reference earlier steps, {ref.step!r} is "
                        "not earlier",
                    )
            producer = spec.templates.get(member.template)
            if producer is None:
                return  # dangling member template reported at its own step
            out_params = producer.outputs.parameters
            out_arts = producer.outputs.artifacts
            stacked = (
                member.slices is not None and ref.name in member.slices.stacked_outputs
            )
            if member.slices is not None and not stacked and (
                ref.name in out_params or ref.name in out_arts
            ):
                self.error(
                    loc,
                    f"output {ref.name!r} of sliced step {ref.step!r} is only "
                    "available per-instance; add it to stacked_outputs",
                )
                return
            if ref.name in out_params:
                if not is_param_slot:
                    self.error(loc, "parameter output bound to an artifact input")
                    return
                src_tag = TypeTag.JSON if stacked else out_params[ref.name].type_tag
                if dst_tag is not None and not tag_compatible(src_tag, dst_tag):
                    self.error(
                        loc,
                        f"output {ref.name!r} of {ref.step!r} ({src_tag.value}) "
                        f"does not feed tag {dst_tag.value}",
                    )
            elif ref.name in out_arts:
                if is_param_slot:
                    self.error(loc, "artifact output bound to a parameter input")
            else:
                if member.slices is not None and not stacked:
                    self.error(
                        loc,
                        f"{member.template!r} output {ref.name!r} of sliced step "
                        f"{ref.step!r} is not stacked",
                    )
                else:
                    self.error(
                        loc,
                        f"{member.template!r} declares no output named {ref.name!r}",
                    )
        elif isinstance(ref, (ItemRef, ItemFieldRef)):
            if step.slices is None:
                self.error(loc, "item references are only valid in sliced steps")
            elif not is_param_slot:
                self.error(loc, "item is a parameter value, not an artifact")

    def check_output_bindings(self, template, members: dict[str, StepDef], loc: str) -> None:
        declared = set(template.outputs.parameters) | set(template.outputs.artifacts)
        for name, ref in template.output_bindings.items():
            ref_loc = f"{loc}.output_bindings.{name}"
            if name not in declared:
                self.error(ref_loc, f"binding for undeclared output {name!r}")
                continue
            is_param_slot = name in template.outputs.parameters
            dst_tag = (
                template.outputs.parameters[name].type_tag if is_param_slot else None
            )
            if isinstance(ref, (ItemRef, ItemFieldRef)):
                self.error(ref_loc, "item references are not valid in output bindings")
                continue
            # output bindings may reference any body member; Steps bodies have
            # fully completed by the time outputs are assembled
            self.check_ref(
                ref, template, None, len(template.body), members, True,
                is_param_slot, dst_tag, ref_loc,
            )
        for name, pspec in template.outputs.parameters.items():
            if name in template.output_bindings or pspec.optional or pspec.default is not None:
                continue
            self.error(loc, f"required output parameter {name!r} is not bound")
        for name, aspec in template.outputs.artifacts.items():
            if name in template.output_bindings or aspec.optional or aspec.default_location is not None:
                continue
            self.error(loc, f"required output artifact {name!r} is not bound")

    # -- placeholder path classification inside when / key_template

    def _classify_body_path(
        self, path, template, step, index, members, is_dag
    ) -> str | None:
        parts = path.split(".")
        if parts[0] == "workflow":
            if len(parts) == 2 and parts[1] in ("name", "id"):
                return None
            return f"unknown workflow attribute in {{{{{path}}}}}"
        if parts[0] == "item":
            if step.slices is None:
                return "item references are only valid in sliced steps"
            if len(parts) > 2:
                return f"item fields are one level deep, got {{{{{path}}}}}"
            return None
        if parts[:2] == ["inputs", "parameters"] and len(parts) == 3:
            if parts[2] not in template.inputs.parameters:
                return f"{template.name!r} declares no input parameter {parts[2]!r}"
            return None
        sibling_prefix = "tasks" if is_dag else "steps"
        if parts[0] == sibling_prefix:
            if len(parts) != 5 or parts[2] != "outputs" or parts[3] != "parameters":
                return f"malformed placeholder path {{{{{path}}}}}"
            member = members.get(parts[1])
            if member is None:
                return f"unknown {sibling_prefix[:-1]} {parts[1]!r}"
            if not is_dag:
                order = [s.name for s in template.body]
                if order.index(parts[1]) >= index:
                    return f"{parts[1]!r} is not an earlier step"
            producer = self.spec.templates.get(member.template)
            if producer is not None and parts[4] not in producer.outputs.parameters:
                return (
                    f"{member.template!r} declares no output parameter {parts[4]!r}"
                )
            if member.slices is not None and (
                member.slices.stacked_outputs.count(parts[4]) == 0
            ):
                return (
                    f"output {parts[4]!r} of sliced step {parts[1]!r} is only "
                    "available per-instance; add it to stacked_outputs"
                )
            return None
        if parts[0] in ("steps", "tasks"):
            return (
                f"use {sibling_prefix}.<name>... inside a "
                f"{'dag' if is_dag else 'steps'} body"
            )
        return f"unknown placeholder path {{{{{path}}}}}"

    # -- template call graph reachability (for recursion warnings)

    def _reachable_templates(self, start: str) -> set[str]:
        seen: set[str] = set()
        frontier = [start]
        while frontier:
            name = frontier.pop()
            if name in seen:
                continue
            seen.add(name)
            target = self.spec.templates.get(name)
            if target is None or isinstance(target, ScriptTemplate):
                continue
            frontier.extend(s.template for s in target.body)
        return seen


def validate_workflow(spec: WorkflowSpec) -> ValidationReport:
    """Check a spec statically; returns a report, never raises.

    Identical specs yield identical reports: iteration follows the spec's own
    declaration order everywhere.
    """
    return _Validator(spec).run()
