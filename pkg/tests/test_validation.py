"""Static validation tests: reference resolution, typing, cycles, warnings."""

import random

import pytest

from opflow.errors import UnresolvedReference, ValidationFailed
from opflow.model import (
    ArtifactSpec,
    ArtifactValue,
    DagTemplate,
    GlobalInputs,
    ItemFieldRef,
    ItemRef,
    LiteralRef,
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
    WorkflowInputRef,
    WorkflowSpec,
    parse_parameter,
    serialize_parameter,
)
from opflow.validation import (
    Diagnostic,
    ValidationReport,
    detect_cycles,
    infer_dag_dependencies,
    require_valid,
    tag_compatible,
    validate_workflow,
)


def script_template(
    name="work",
    *,
    inputs=None,
    outputs=None,
    sources=None,
    artifact_sources=None,
    mounts=None,
    script="echo hi\n",
):
    return ScriptTemplate(
        name=name,
        command=("bash", "-ec"),
        script=script,
        inputs=inputs or Signature(),
        outputs=outputs or Signature(),
        output_parameter_sources=sources or {},
        output_artifact_sources=artifact_sources or {},
        input_artifact_mounts=mounts or {},
    )


def steps_spec(body, *, templates=None, outputs=None, output_bindings=None,
               template_inputs=None, global_inputs=None, name="wf"):
    """A workflow whose entrypoint is a Steps template over `body`."""
    all_templates = {"work": script_template()}
    all_templates.update(templates or {})
    main = StepsTemplate(
        name="main",
        body=tuple(body),
        inputs=template_inputs or Signature(),
        outputs=outputs or Signature(),
        output_bindings=output_bindings or {},
    )
    all_templates["main"] = main
    return WorkflowSpec(
        name=name,
        templates=all_templates,
        entrypoint="main",
        global_inputs=global_inputs or GlobalInputs(),
    )


def dag_spec(body, *, templates=None, global_inputs=None):
    all_templates = {"work": script_template()}
    all_templates.update(templates or {})
    all_templates["main"] = DagTemplate(name="main", body=tuple(body))
    return WorkflowSpec(
        name="wf",
        templates=all_templates,
        entrypoint="main",
        global_inputs=global_inputs or GlobalInputs(),
    )


def error_messages(spec):
    return [d.message for d in validate_workflow(spec).errors()]


def assert_error(spec, fragment):
    messages = error_messages(spec)
    assert any(fragment in m for m in messages), f"{fragment!r} not in {messages}"


def assert_clean(spec):
    report = validate_workflow(spec)
    assert report.ok, str(report)


class TestReportBasics:
    def test_accepts_minimal_spec(self):
        spec = steps_spec([StepDef(name="only", template="work")])
        report = validate_workflow(spec)
        assert report.ok
        assert report.diagnostics == []
        assert str(report) == "spec accepted, no diagnostics"

    def test_require_valid_passthrough_and_raise(self):
        good = steps_spec([StepDef(name="only", template="work")])
        assert require_valid(good).ok
        bad = steps_spec([StepDef(name="only", template="nope")])
        with pytest.raises(ValidationFailed) as exc_info:
            require_valid(bad)
        assert exc_info.value.report.errors()

    def test_diagnostic_rendering(self):
        d = Diagnostic("error", "templates.x", "broken")
        assert str(d) == "error: templates.x: broken"

    def test_warnings_do_not_block(self):
        report = ValidationReport([Diagnostic("warning", "a", "meh")])
        assert report.ok
        assert report.warnings() and not report.errors()

    def test_reports_are_deterministic(self):
        bad = steps_spec([
            StepDef(name="a", template="nope"),
            StepDef(name="a", template="work"),
        ])
        assert validate_workflow(bad) == validate_workflow(bad)


class TestIdentifiers:
    def test_workflow_name(self):
        spec = steps_spec([StepDef(name="only", template="work")], name="no spaces")
        assert_error(spec, "invalid identifier 'no spaces'")

    def test_template_name(self):
        bad = script_template(name="bad name!")
        spec = steps_spec(
            [StepDef(name="only", template="bad name!")],
            templates={"bad name!": bad},
        )
        assert_error(spec, "invalid identifier 'bad name!'")

    def test_step_name(self):
        spec = steps_spec([StepDef(name="a/b", template="work")])
        assert_error(spec, "invalid identifier 'a/b'")

    def test_signature_slot_names(self):
        work = script_template(
            inputs=Signature(parameters={"bad name": ParameterSpec()}),
        )
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={"bad name": LiteralRef(ParameterValue("x"))})],
            templates={"work": work},
        )
        assert_error(spec, "invalid identifier 'bad name'")

    def test_unresolved_entrypoint(self):
        spec = WorkflowSpec(name="wf", templates={"work": script_template()},
                            entrypoint="missing")
        assert_error(spec, "unresolved template 'missing'")


class TestGlobalInputs:
    def test_value_for_undeclared_parameter(self):
        gi = GlobalInputs(parameter_values={"ghost": "1"})
        spec = steps_spec([StepDef(name="only", template="work")], global_inputs=gi)
        assert_error(spec, "undeclared parameter")

    def test_unparsable_value(self):
        gi = GlobalInputs(parameters={"n": ParameterSpec(TypeTag.INT)},
                          parameter_values={"n": "abc"})
        spec = steps_spec([StepDef(name="only", template="work")], global_inputs=gi)
        assert error_messages(spec)

    def test_location_for_undeclared_artifact(self):
        gi = GlobalInputs(artifact_values={"ghost": ArtifactValue("some/key")})
        spec = steps_spec([StepDef(name="only", template="work")], global_inputs=gi)
        assert_error(spec, "undeclared artifact")

    def test_entrypoint_requires_parameter_declaration(self):
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={})],
            template_inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT)}),
        )
        assert_error(spec, "entrypoint requires parameter 'n'")

    def test_entrypoint_parameter_tag_must_feed(self):
        gi = GlobalInputs(parameters={"n": ParameterSpec(TypeTag.STRING)})
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            template_inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT)}),
            global_inputs=gi,
        )
        assert_error(spec, "does not feed entrypoint tag int")

    def test_optional_entrypoint_inputs_need_no_globals(self):
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            template_inputs=Signature(parameters={
                "opt": ParameterSpec(TypeTag.INT, optional=True),
                "dft": ParameterSpec(TypeTag.INT, default="3"),
            }),
        )
        assert_clean(spec)

    def test_entrypoint_requires_artifact_declaration(self):
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            template_inputs=Signature(artifacts={"blob": ArtifactSpec()}),
        )
        assert_error(spec, "entrypoint requires artifact 'blob'")


class TestScriptTemplateChecks:
    def test_output_parameter_needs_source(self):
        work = script_template(
            outputs=Signature(parameters={"out": ParameterSpec()}),
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "output parameter 'out' has no source path")

    def test_source_for_undeclared_output(self):
        work = script_template(sources={"ghost": "out.txt"})
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "names undeclared output 'ghost'")

    def test_output_artifact_needs_source(self):
        work = script_template(
            outputs=Signature(artifacts={"blob": ArtifactSpec()}),
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "output artifact 'blob' has no source path")

    def test_input_artifact_needs_mount(self):
        work = script_template(
            inputs=Signature(artifacts={"blob": ArtifactSpec(optional=True)}),
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "input artifact 'blob' has no mount path")

    def test_mount_for_undeclared_artifact(self):
        work = script_template(mounts={"ghost": "in/ghost"})
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "input_artifact_mounts names undeclared artifact 'ghost'")

    def test_mount_paths_must_be_distinct(self):
        work = script_template(
            inputs=Signature(artifacts={
                "a": ArtifactSpec(optional=True),
                "b": ArtifactSpec(optional=True),
            }),
            mounts={"a": "shared", "b": "shared"},
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "mount paths are not distinct")

    @pytest.mark.parametrize("path", ["/abs/path", "up/../../escape", ""])
    def test_paths_must_be_relative_and_contained(self, path):
        work = script_template(
            outputs=Signature(parameters={"out": ParameterSpec()}),
            sources={"out": path},
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "must be relative without '..'")

    def test_script_placeholders_resolve(self):
        work = script_template(
            inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT)}),
            script="echo {{inputs.parameters.n}} {{workflow.name}} "
                   "{{workflow.id}} {{item}} {{item.field}}\n",
        )
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))})],
            templates={"work": work},
        )
        assert_clean(spec)

    @pytest.mark.parametrize("placeholder", [
        "{{inputs.parameters.ghost}}",
        "{{outputs.parameters.out}}",
        "{{workflow.uid}}",
        "{{item.a.b}}",
        "{{steps.x.outputs.parameters.y}}",
    ])
    def test_unknown_script_placeholder(self, placeholder):
        work = script_template(script=f"echo {placeholder}\n")
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "unknown placeholder")


class TestStepChecks:
    def test_duplicate_step_names(self):
        spec = steps_spec([
            StepDef(name="twin", template="work"),
            StepDef(name="twin", template="work"),
        ])
        assert_error(spec, "duplicate step name 'twin'")

    def test_unresolved_step_template(self):
        spec = steps_spec([StepDef(name="only", template="ghost")])
        assert_error(spec, "unresolved template 'ghost'")

    def test_dependencies_rejected_outside_dag(self):
        spec = steps_spec([
            StepDef(name="a", template="work"),
            StepDef(name="b", template="work", explicit_dependencies=("a",)),
        ])
        assert_error(spec, "dependencies are only valid in DAG bodies")

    def test_unknown_dependency(self):
        spec = dag_spec([StepDef(name="a", template="work",
                                 explicit_dependencies=("ghost",))])
        assert_error(spec, "unknown dependency 'ghost'")

    def test_self_dependency(self):
        spec = dag_spec([StepDef(name="a", template="work",
                                 explicit_dependencies=("a",))])
        assert_error(spec, "cannot depend on itself")

    def test_success_count_requires_slices(self):
        spec = steps_spec([StepDef(name="a", template="work",
                                   continue_on_success_ratio=0.5)])
        assert_error(spec, "success-count continuation requires slices")

    def test_ratio_and_count_are_exclusive(self):
        work = script_template(
            inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT)}),
        )
        spec = steps_spec(
            [StepDef(
                name="a", template="work",
                input_bindings={"n": LiteralRef(ParameterValue("[1]", TypeTag.JSON))},
                slices=SlicesConfig(sliced_inputs=("n",)),
                continue_on_success_ratio=0.5,
                continue_on_num_success=1,
            )],
            templates={"work": work},
        )
        assert_error(spec, "exclusive")

    def test_timeout_on_composite_step_warns(self):
        inner = StepsTemplate(name="inner",
                              body=(StepDef(name="leaf", template="work"),))
        spec = steps_spec(
            [StepDef(name="a", template="inner", timeout_seconds=5.0)],
            templates={"inner": inner},
        )
        report = validate_workflow(spec)
        assert report.ok
        assert any("timeout_seconds has no effect" in d.message
                   for d in report.warnings())

    def test_unconditional_recursion_warns(self):
        main = StepsTemplate(name="main", body=(
            StepDef(name="again", template="main"),
        ))
        spec = WorkflowSpec(name="wf", templates={"main": main}, entrypoint="main")
        report = validate_workflow(spec)
        assert report.ok
        assert any("recursion depth limit" in d.message for d in report.warnings())

    def test_conditional_recursion_does_not_warn(self):
        main = StepsTemplate(name="main", body=(
            StepDef(name="again", template="main", when="1 < 2"),
        ))
        spec = WorkflowSpec(name="wf", templates={"main": main}, entrypoint="main")
        report = validate_workflow(spec)
        assert report.ok and not report.warnings()

    def test_indirect_recursion_warns(self):
        outer = StepsTemplate(name="outer",
                              body=(StepDef(name="down", template="inner"),))
        inner = StepsTemplate(name="inner",
                              body=(StepDef(name="up", template="outer"),))
        spec = WorkflowSpec(name="wf", entrypoint="outer",
                            templates={"outer": outer, "inner": inner})
        report = validate_workflow(spec)
        assert report.ok
        assert len(report.warnings()) == 2

    def test_forward_reference_in_steps_body(self):
        work = script_template(
            inputs=Signature(parameters={"n": ParameterSpec()}),
            outputs=Signature(parameters={"out": ParameterSpec()}),
            sources={"out": "out.txt"},
        )
        spec = steps_spec(
            [
                StepDef(name="first", template="work",
                        input_bindings={"n": StepOutputRef("second", "out")}),
                StepDef(name="second", template="work",
                        input_bindings={"n": LiteralRef(ParameterValue("x"))}),
            ],
            templates={"work": work},
        )
        assert_error(spec, "'second' is not earlier")

    def test_required_input_must_be_bound(self):
        work = script_template(
            inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT)}),
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "required input parameter 'n' is not bound")

    def test_required_artifact_must_be_bound(self):
        work = script_template(
            inputs=Signature(artifacts={"blob": ArtifactSpec()}),
            mounts={"blob": "in/blob"},
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_error(spec, "required input artifact 'blob' is not bound")

    def test_defaults_satisfy_required_inputs(self):
        work = script_template(
            inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT, default="1")}),
        )
        spec = steps_spec([StepDef(name="only", template="work")],
                          templates={"work": work})
        assert_clean(spec)


def _typed_work():
    """Script with an int/artifact input and string/artifact outputs."""
    return script_template(
        inputs=Signature(
            parameters={"n": ParameterSpec(TypeTag.INT)},
            artifacts={"blob": ArtifactSpec(optional=True)},
        ),
        outputs=Signature(
            parameters={"out": ParameterSpec(TypeTag.STRING)},
            artifacts={"result": ArtifactSpec()},
        ),
        sources={"out": "out.txt"},
        artifact_sources={"result": "result.bin"},
        mounts={"blob": "in/blob"},
    )


def _one_step(bindings, **step_kw):
    return steps_spec(
        [StepDef(name="only", template="work", input_bindings=bindings, **step_kw)],
        templates={"work": _typed_work()},
    )


class TestRefChecks:
    def test_binding_for_unknown_input(self):
        spec = _one_step({"ghost": LiteralRef(ParameterValue("1", TypeTag.INT)),
                          "n": LiteralRef(ParameterValue("1", TypeTag.INT))})
        assert_error(spec, "declares no input named 'ghost'")

    def test_parameter_literal_to_artifact_slot(self):
        spec = _one_step({"n": LiteralRef(ParameterValue("1", TypeTag.INT)),
                          "blob": LiteralRef(ParameterValue("oops"))})
        assert_error(spec, "parameter literal bound to an artifact input")

    def test_artifact_literal_to_parameter_slot(self):
        spec = _one_step({"n": LiteralRef(ArtifactValue("some/key"))})
        assert_error(spec, "artifact literal bound to a parameter input")

    def test_literal_must_parse_under_slot_tag(self):
        spec = _one_step({"n": LiteralRef(ParameterValue("abc"))})
        assert_error(spec, "literal 'abc' does not parse as int")

    def test_workflow_ref_shapes(self):
        gi = GlobalInputs(
            parameters={"p": ParameterSpec(TypeTag.FLOAT)},
            artifacts={"a": ArtifactSpec()},
            artifact_values={"a": ArtifactValue("k")},
        )
        spec = steps_spec(
            [StepDef(name="only", template="work", input_bindings={
                "n": WorkflowInputRef("p"),      # float does not feed int
                "blob": WorkflowInputRef("p"),   # parameter into artifact slot
            })],
            templates={"work": _typed_work()},
            global_inputs=gi,
        )
        messages = error_messages(spec)
        assert any("does not feed tag int" in m for m in messages)
        assert any("workflow parameter bound to an artifact input" in m
                   for m in messages)

        spec = steps_spec(
            [StepDef(name="only", template="work", input_bindings={
                "n": WorkflowInputRef("a"),
            })],
            templates={"work": _typed_work()},
            global_inputs=gi,
        )
        assert_error(spec, "workflow artifact bound to a parameter input")

    def test_unresolved_workflow_input(self):
        spec = _one_step({"n": WorkflowInputRef("ghost")})
        assert_error(spec, "unresolved workflow input 'ghost'")

    def test_template_input_ref_shapes(self):
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={"n": TemplateInputRef("s")})],
            templates={"work": _typed_work()},
            template_inputs=Signature(parameters={"s": ParameterSpec(TypeTag.STRING)}),
        )
        assert_error(spec, "does not feed tag int")

        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={"n": TemplateInputRef("ghost")})],
            templates={"work": _typed_work()},
        )
        assert_error(spec, "'main' declares no input named 'ghost'")

    def test_step_output_ref_shapes(self):
        work = _typed_work()
        first = StepDef(name="first", template="work",
                        input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))})

        spec = steps_spec(
            [first, StepDef(name="second", template="work",
                            input_bindings={"n": StepOutputRef("ghost", "out")})],
            templates={"work": work},
        )
        assert_error(spec, "unresolved step 'ghost'")

        spec = steps_spec(
            [first, StepDef(name="second", template="work",
                            input_bindings={"n": StepOutputRef("first", "zzz")})],
            templates={"work": work},
        )
        assert_error(spec, "declares no output named 'zzz'")

        # string output cannot feed an int slot
        spec = steps_spec(
            [first, StepDef(name="second", template="work",
                            input_bindings={"n": StepOutputRef("first", "out")})],
            templates={"work": work},
        )
        assert_error(spec, "does not feed tag int")

        # artifact output into a parameter slot and the reverse
        spec = steps_spec(
            [first, StepDef(name="second", template="work",
                            input_bindings={"n": StepOutputRef("first", "result")})],
            templates={"work": work},
        )
        assert_error(spec, "artifact output bound to a parameter input")

        spec = steps_spec(
            [first, StepDef(name="second", template="work",
                            input_bindings={
                                "n": LiteralRef(ParameterValue("1", TypeTag.INT)),
                                "blob": StepOutputRef("first", "out"),
                            })],
            templates={"work": work},
        )
        assert_error(spec, "parameter output bound to an artifact input")

    def test_sliced_outputs_must_be_stacked_to_bind(self):
        work = _typed_work()
        fan = StepDef(
            name="fan", template="work",
            input_bindings={"n": LiteralRef(ParameterValue("[1,2]", TypeTag.JSON))},
            slices=SlicesConfig(sliced_inputs=("n",)),
        )
        spec = steps_spec(
            [fan, StepDef(name="second", template="work",
                          input_bindings={"n": StepOutputRef("fan", "out")})],
            templates={"work": work},
        )
        assert_error(spec, "only available per-instance")

    def test_stacked_output_is_json_at_group_level(self):
        work = _typed_work()
        fan = StepDef(
            name="fan", template="work",
            input_bindings={"n": LiteralRef(ParameterValue("[1,2]", TypeTag.JSON))},
            slices=SlicesConfig(sliced_inputs=("n",), stacked_outputs=("out",)),
        )
        # json (stacked) does not feed the int slot
        spec = steps_spec(
            [fan, StepDef(name="second", template="work",
                          input_bindings={"n": StepOutputRef("fan", "out")})],
            templates={"work": work},
        )
        assert_error(spec, "does not feed tag int")

    def test_item_refs_require_slices(self):
        spec = _one_step({"n": ItemRef()})
        assert_error(spec, "item references are only valid in sliced steps")

    def test_item_ref_is_not_an_artifact(self):
        spec = _one_step(
            {"n": LiteralRef(ParameterValue("[1]", TypeTag.JSON)),
             "blob": ItemFieldRef("f")},
            slices=SlicesConfig(sliced_inputs=("n",)),
        )
        assert_error(spec, "item is a parameter value, not an artifact")


class TestOutputBindings:
    def test_binding_for_undeclared_output(self):
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            output_bindings={"ghost": LiteralRef(ParameterValue("x"))},
        )
        assert_error(spec, "binding for undeclared output 'ghost'")

    def test_required_outputs_must_be_bound(self):
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            outputs=Signature(parameters={"out": ParameterSpec()},
                              artifacts={"blob": ArtifactSpec()}),
        )
        messages = error_messages(spec)
        assert any("required output parameter 'out' is not bound" in m
                   for m in messages)
        assert any("required output artifact 'blob' is not bound" in m
                   for m in messages)

    def test_item_refs_rejected(self):
        spec = steps_spec(
            [StepDef(name="only", template="work")],
            outputs=Signature(parameters={"out": ParameterSpec()}),
            output_bindings={"out": ItemRef()},
        )
        assert_error(spec, "item references are not valid in output bindings")

    def test_last_step_may_feed_outputs(self):
        work = _typed_work()
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))})],
            templates={"work": work},
            outputs=Signature(parameters={"out": ParameterSpec(TypeTag.STRING)}),
            output_bindings={"out": StepOutputRef("only", "out")},
        )
        assert_clean(spec)


class TestWhenAndKeyPlaceholders:
    def _with_when(self, when, **step_kw):
        return steps_spec([StepDef(name="only", template="work", when=when,
                                   **step_kw)])

    def test_workflow_attributes(self):
        assert_clean(self._with_when("'{{workflow.name}}' == 'wf'"))
        assert_error(self._with_when("'{{workflow.uid}}' == 'x'"),
                     "unknown workflow attribute")

    def test_item_paths(self):
        assert_error(self._with_when("{{item}} > 0"),
                     "item references are only valid in sliced steps")
        work = _typed_work()
        fan = StepDef(
            name="fan", template="work", when="{{item.a.b.c}} > 0",
            input_bindings={"n": LiteralRef(ParameterValue("[1]", TypeTag.JSON))},
            slices=SlicesConfig(sliced_inputs=("n",)),
        )
        assert_error(steps_spec([fan], templates={"work": work}),
                     "item fields are one level deep")

    def test_template_input_paths(self):
        spec = steps_spec(
            [StepDef(name="only", template="work",
                     when="{{inputs.parameters.n}} > 0")],
            template_inputs=Signature(parameters={"n": ParameterSpec(TypeTag.INT,
                                                                     default="1")}),
        )
        assert_clean(spec)
        assert_error(self._with_when("{{inputs.parameters.ghost}} > 0"),
                     "'main' declares no input parameter 'ghost'")

    def test_sibling_output_paths(self):
        work = _typed_work()
        first = StepDef(name="first", template="work",
                        input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))})

        def second(when):
            return steps_spec(
                [first, StepDef(name="second", template="work", when=when,
                                input_bindings={"n": LiteralRef(
                                    ParameterValue("1", TypeTag.INT))})],
                templates={"work": work},
            )

        assert_clean(second("'{{steps.first.outputs.parameters.out}}' == 'x'"))
        assert_error(second("'{{steps.ghost.outputs.parameters.out}}' == 'x'"),
                     "unknown step 'ghost'")
        assert_error(second("'{{steps.first.outputs.out}}' == 'x'"),
                     "malformed placeholder path")
        assert_error(second("'{{steps.first.outputs.parameters.zzz}}' == 'x'"),
                     "declares no output parameter 'zzz'")
        assert_error(second("'{{steps.second.outputs.parameters.out}}' == 'x'"),
                     "'second' is not an earlier step")
        assert_error(second("'{{tasks.first.outputs.parameters.out}}' == 'x'"),
                     "use steps.<name>")

    def test_dag_uses_tasks_prefix(self):
        spec = dag_spec([StepDef(name="a", template="work",
                                 when="'{{steps.a.outputs.parameters.out}}' == 'x'")])
        assert_error(spec, "use tasks.<name>")

    def test_sliced_sibling_must_be_stacked(self):
        work = _typed_work()
        fan = StepDef(
            name="fan", template="work",
            input_bindings={"n": LiteralRef(ParameterValue("[1]", TypeTag.JSON))},
            slices=SlicesConfig(sliced_inputs=("n",)),
        )
        gate = StepDef(name="gate", template="work",
                       when="'{{steps.fan.outputs.parameters.out}}' == 'x'",
                       input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))})
        assert_error(steps_spec([fan, gate], templates={"work": work}),
                     "only available per-instance")

    def test_unknown_root(self):
        assert_error(self._with_when("{{bogus.path}} > 0"),
                     "unknown placeholder path")

    def test_key_template_paths_are_checked_too(self):
        spec = steps_spec([StepDef(name="only", template="work",
                                   key_template="job-{{workflow.uid}}")])
        assert_error(spec, "unknown workflow attribute")


class TestDagAnalysis:
    def test_cycle_is_reported_with_witness(self):
        work = _typed_work()
        body = [
            StepDef(name="a", template="work",
                    input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))},
                    explicit_dependencies=("c",)),
            StepDef(name="b", template="work",
                    input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))},
                    explicit_dependencies=("a",)),
            StepDef(name="c", template="work",
                    input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))},
                    explicit_dependencies=("b",)),
        ]
        messages = error_messages(dag_spec(body, templates={"work": work}))
        cycle_messages = [m for m in messages if "dependency cycle" in m]
        assert cycle_messages
        for name in ("a", "b", "c"):
            assert name in cycle_messages[0]

    def test_listing_order_is_free_in_dags(self):
        work = _typed_work()
        body = [
            StepDef(name="late", template="work",
                    input_bindings={"n": StepOutputRef("early", "out")}),
            StepDef(name="early", template="work",
                    input_bindings={"n": LiteralRef(ParameterValue("1", TypeTag.INT))}),
        ]
        # string out feeding int is a tag error; rebind via a json-friendly slot
        relaxed = script_template(
            name="work",
            inputs=Signature(parameters={"n": ParameterSpec(TypeTag.STRING)}),
            outputs=Signature(parameters={"out": ParameterSpec(TypeTag.STRING)}),
            sources={"out": "out.txt"},
        )
        assert_clean(dag_spec(body, templates={"work": relaxed}))

    def test_inferred_edges(self):
        template = DagTemplate(name="d", body=(
            StepDef(name="a", template="work"),
            StepDef(name="b", template="work",
                    input_bindings={"n": StepOutputRef("a", "out")}),
            StepDef(name="c", template="work",
                    when="'{{tasks.a.outputs.parameters.out}}' == 'x'"),
            StepDef(name="d", template="work",
                    key_template="{{tasks.b.outputs.parameters.out}}"),
            StepDef(name="e", template="work", explicit_dependencies=("c",)),
        ))
        assert infer_dag_dependencies(template) == (
            ("a", "b"), ("a", "c"), ("b", "d"), ("c", "e"),
        )

    def test_unknown_producer_raises(self):
        template = DagTemplate(name="d", body=(
            StepDef(name="a", template="work",
                    input_bindings={"n": StepOutputRef("ghost", "out")}),
        ))
        with pytest.raises(UnresolvedReference):
            infer_dag_dependencies(template)

    def test_detect_cycles(self):
        assert detect_cycles([("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
                             ["a", "b", "c", "d"]) is None
        assert detect_cycles([("a", "a")], ["a"]) == ["a"]
        witness = detect_cycles([("a", "b"), ("b", "a")], ["a", "b"])
        assert witness in (["a", "b"], ["b", "a"])


class TestTagCompatibility:
    """tag_compatible(src, dst) must mean: every canonical src text parses
    under dst.  Checked against parse_parameter itself."""

    def _canonical_samples(self, tag, rng):
        if tag is TypeTag.STRING:
            pool = ["hello", "", "007", "true", "1.5", "[not json", "a b"]
            pool += ["".join(rng.choices("ab c?", k=5)) for _ in range(20)]
        elif tag is TypeTag.INT:
            pool = [0, 1, -7, 10 ** 18]
            pool += [rng.randint(-10 ** 9, 10 ** 9) for _ in range(20)]
        elif tag is TypeTag.FLOAT:
            pool = [0.0, -1.5, 3.25, 1e-9, 2e300]
            pool += [rng.uniform(-1e6, 1e6) for _ in range(20)]
        elif tag is TypeTag.BOOL:
            pool = [True, False]
        else:
            pool = [None, [1, 2], {"a": 1}, "text", True, 3, 1.25, [], {}]
        return [serialize_parameter(tag, value) for value in pool]

    def test_matrix_against_parser(self):
        rng = random.Random(411)
        for src in TypeTag:
            texts = self._canonical_samples(src, rng)
            for dst in TypeTag:
                outcomes = []
                for text in texts:
                    try:
                        parse_parameter(dst, text)
                        outcomes.append(True)
                    except Exception:
                        outcomes.append(False)
                if tag_compatible(src, dst):
                    assert all(outcomes), (src, dst)
                else:
                    assert not all(outcomes), (src, dst)

    def test_reflexive(self):
        for tag in TypeTag:
            assert tag_compatible(tag, tag)

    def test_everything_feeds_string(self):
        for tag in TypeTag:
            assert tag_compatible(tag, TypeTag.STRING)
