"""Workflow state store tests: layout, write discipline, phase legality."""

import json
import random
import re

import pytest

from opflow.errors import (
    IllegalPhaseTransition,
    TypeMismatch,
    UnknownOutput,
    UnknownWorkflow,
)
from opflow.model import (
    ArtifactValue,
    Failure,
    ParameterValue,
    Phase,
    StepRecord,
    TypeTag,
)
from opflow.statestore import (
    WorkflowStore,
    is_safe_step_key,
    modify_output_artifact,
    modify_output_parameter,
)

WORKFLOW_ID_RE = re.compile(r"^demo-[0-9a-f]{8}$")


def make_record(key, phase=Phase.PENDING, **kw):
    defaults = dict(name="leaf", template="work", type_word="Pod")
    defaults.update(kw)
    return StepRecord(key=key, phase=phase, **defaults)


@pytest.fixture
def store(tmp_path):
    return WorkflowStore(tmp_path / "workflows")


@pytest.fixture
def wf(store):
    return store.create_workflow("demo", "name: demo\n")


class TestSafeKeys:
    @pytest.mark.parametrize("key", [
        "a", "step", "run--leaf-0", "a.b_c-d", "0start", "x" * 255,
    ])
    def test_accepts(self, key):
        assert is_safe_step_key(key)

    @pytest.mark.parametrize("key", [
        "", ".", "..", ".hidden", "-dash", "a/b", "a b", "a\nb",
        "x" * 256, "status", "spec.yaml", 5, None,
    ])
    def test_rejects(self, key):
        assert not is_safe_step_key(key)

    def test_persist_refuses_unsafe_keys(self, store, wf):
        with pytest.raises(ValueError):
            store.persist_step(wf, make_record("bad/key"))


class TestWorkflowLifecycle:
    def test_create_allocates_id_and_layout(self, store, wf):
        assert WORKFLOW_ID_RE.match(wf)
        assert store.exists(wf)
        assert store.read_status(wf) is Phase.PENDING
        assert store.read_spec_text(wf) == "name: demo\n"

    def test_ids_are_fresh(self, store):
        ids = {store.create_workflow("demo", "x") for _ in range(20)}
        assert len(ids) == 20

    def test_status_transitions_follow_the_phase_machine(self, store, wf):
        store.write_status(wf, Phase.RUNNING)
        store.write_status(wf, Phase.RUNNING)  # same-phase rewrite is legal
        store.write_status(wf, Phase.SUCCEEDED)
        assert store.read_status(wf) is Phase.SUCCEEDED
        with pytest.raises(IllegalPhaseTransition):
            store.write_status(wf, Phase.FAILED)

    def test_pending_cannot_jump_to_failed(self, store, wf):
        with pytest.raises(IllegalPhaseTransition):
            store.write_status(wf, Phase.FAILED)

    def test_unknown_workflow(self, store):
        with pytest.raises(UnknownWorkflow):
            store.read_status("ghost-00000000")
        with pytest.raises(UnknownWorkflow):
            store.read_spec_text("ghost-00000000")
        with pytest.raises(UnknownWorkflow):
            store.list_steps("ghost-00000000")
        with pytest.raises(UnknownWorkflow):
            store.persist_step("ghost-00000000", make_record("a"))

    def test_list_workflows_sorted_and_filtered(self, store):
        ids = sorted(store.create_workflow("demo", "x") for _ in range(3))
        (store.root / "nonsense.txt").write_text("junk")
        (store.root / "not-a-workflow").mkdir()
        broken = store.root / "broken-phase"
        broken.mkdir()
        (broken / "status").write_text("Exploded")
        listed = store.list_workflows()
        assert [wf_id for wf_id, _ in listed] == ids
        assert all(phase is Phase.PENDING for _, phase in listed)


def full_record(key="run--leaf", phase=Phase.SUCCEEDED):
    return StepRecord(
        key=key,
        name="leaf",
        template="work",
        type_word="Pod",
        phase=phase,
        attempt=2,
        key_source="explicit",
        input_parameters={
            "n": ParameterValue("7", TypeTag.INT),
            "msg": ParameterValue("hi there", TypeTag.STRING),
        },
        input_artifacts={"blob": ArtifactValue("workflows/x/up/blob")},
        output_parameters={
            "out": ParameterValue("[1,2]", TypeTag.JSON),
            "flag": ParameterValue("true", TypeTag.BOOL),
        },
        output_artifacts={
            "result": ArtifactValue("workflows/x/run--leaf/result", optional=True),
        },
        parent="run",
        slice_index=3,
        seq=5,
        started_at=100.25,
        ended_at=103.5,
        failure=Failure("fatal", "boom"),
        dag_edges=(("a", "b"), ("a", "c")),
    )


class TestPersistAndLoad:
    def test_round_trip_is_exact(self, store, wf):
        record = full_record()
        store.persist_step(wf, record)
        assert store.load_step(wf, record.key) == record

    def test_layout_on_disk(self, store, wf):
        record = full_record()
        store.persist_step(wf, record)
        step_dir = store.step_dir(wf, record.key)
        files = sorted(
            p.relative_to(step_dir).as_posix() for p in step_dir.rglob("*")
            if p.is_file()
        )
        assert files == [
            "inputs/artifacts/blob",
            "inputs/parameters/msg",
            "inputs/parameters/n",
            "meta.json",
            "outputs/artifacts/result",
            "outputs/parameters/flag",
            "outputs/parameters/out",
            "phase",
            "type",
        ]
        assert (step_dir / "phase").read_text() == "Succeeded"
        assert (step_dir / "type").read_text() == "Pod"
        assert (step_dir / "inputs" / "parameters" / "n").read_text() == "7"
        assert (step_dir / "outputs" / "parameters" / "out").read_text() == "[1,2]"
        meta = json.loads((step_dir / "meta.json").read_text())
        assert meta["parameter_tags"]["outputs"]["out"] == "json"
        assert meta["artifact_flags"]["outputs"]["result"] is True
        assert meta["failure"] == {"kind": "fatal", "message": "boom"}
        assert meta["dag_edges"] == [["a", "b"], ["a", "c"]]

    def test_persist_is_idempotent(self, store, wf):
        record = full_record()
        store.persist_step(wf, record)
        before = (store.step_dir(wf, record.key) / "meta.json").stat().st_mtime_ns
        store.persist_step(wf, record)
        after = (store.step_dir(wf, record.key) / "meta.json").stat().st_mtime_ns
        assert before == after  # unchanged content is not rewritten
        assert store.load_step(wf, record.key) == record

    def test_step_phase_legality_enforced(self, store, wf):
        store.persist_step(wf, make_record("s", Phase.PENDING))
        store.persist_step(wf, make_record("s", Phase.RUNNING, attempt=1))
        store.persist_step(wf, make_record("s", Phase.RUNNING, attempt=2))
        store.persist_step(wf, make_record("s", Phase.SUCCEEDED, attempt=2))
        with pytest.raises(IllegalPhaseTransition):
            store.persist_step(wf, make_record("s", Phase.FAILED))
        assert store.load_step(wf, "s").phase is Phase.SUCCEEDED

    def test_step_pending_cannot_jump_to_failed(self, store, wf):
        store.persist_step(wf, make_record("s", Phase.PENDING))
        with pytest.raises(IllegalPhaseTransition):
            store.persist_step(wf, make_record("s", Phase.FAILED))

    def test_outputs_only_visible_in_output_bearing_phases(self, store, wf):
        record = make_record(
            "s", Phase.RUNNING,
            output_parameters={"out": ParameterValue("x")},
        )
        store.persist_step(wf, record)
        assert not (store.step_dir(wf, "s") / "outputs").exists()
        assert store.load_step(wf, "s").output_parameters == {}

    def test_reused_phase_bears_outputs(self, store, wf):
        record = make_record(
            "s", Phase.REUSED,
            output_parameters={"out": ParameterValue("x")},
        )
        store.persist_step(wf, record)
        assert store.load_step(wf, "s").output_parameters == {
            "out": ParameterValue("x")
        }

    def test_trailing_newline_discipline(self, store, wf):
        # value files strip exactly one trailing newline on read
        record = make_record(
            "s", Phase.SUCCEEDED,
            output_parameters={"out": ParameterValue("line\n")},
        )
        store.persist_step(wf, record)
        assert store.load_step(wf, "s").output_parameters["out"].text == "line"

    def test_round_trip_randomized(self, store, wf):
        rng = random.Random(5150)
        tags = list(TypeTag)
        for i in range(20):
            params = {
                f"p{j}": ParameterValue(str(rng.randint(0, 99)), TypeTag.INT)
                for j in range(rng.randint(0, 3))
            }
            record = StepRecord(
                key=f"step-{i}",
                name=f"n{i}",
                template="work",
                type_word=rng.choice(["Pod", "Steps", "DAG"]),
                phase=Phase.SUCCEEDED,
                attempt=rng.randint(0, 3),
                key_source=rng.choice(["generated", "explicit"]),
                input_parameters=params,
                output_parameters={
                    "out": ParameterValue(
                        "true" if rng.random() < 0.5 else "false", TypeTag.BOOL
                    )
                },
                seq=rng.randint(0, 100),
                slice_index=rng.choice([None, 0, 5]),
                parent=rng.choice([None, "run"]),
            )
            store.persist_step(wf, record)
            assert store.load_step(wf, record.key) == record
            _ = tags  # tag variety covered by full_record

    def test_list_steps_sorted_by_seq_then_key(self, store, wf):
        order = [("c", 2), ("a", 2), ("b", 1)]
        for key, seq in order:
            store.persist_step(wf, make_record(key, seq=seq))
        assert [r.key for r in store.list_steps(wf)] == ["b", "a", "c"]

    def test_list_steps_skips_husks(self, store, wf):
        store.persist_step(wf, make_record("real"))
        husk = store.workflow_dir(wf) / "husk"
        husk.mkdir()
        (husk / "meta.json").write_text("{}")  # no phase file yet
        assert [r.key for r in store.list_steps(wf)] == ["real"]

    def test_query_step(self, store, wf):
        record = make_record("s")
        store.persist_step(wf, record)
        assert store.query_step(wf, "s") == record
        assert store.query_step(wf, "ghost") is None


class TestHarvestReuse:
    def test_only_explicit_output_bearing_records(self, store, wf):
        keep_a = make_record("a", Phase.SUCCEEDED, key_source="explicit")
        keep_b = make_record("b", Phase.REUSED, key_source="explicit")
        store.persist_step(wf, keep_a)
        store.persist_step(wf, keep_b)
        store.persist_step(wf, make_record("c", Phase.SUCCEEDED))  # generated
        store.persist_step(wf, make_record("d", Phase.PENDING, key_source="explicit"))
        store.persist_step(wf, make_record("e", Phase.SKIPPED, key_source="explicit"))
        assert store.harvest_reuse(wf) == [keep_a, keep_b]


class TestModifyOutputs:
    def test_parameter_replacement_canonicalizes(self):
        record = full_record()
        out = modify_output_parameter(record, "out", "[3, 4]")
        assert out.output_parameters["out"] == ParameterValue("[3,4]", TypeTag.JSON)
        # original untouched
        assert record.output_parameters["out"].text == "[1,2]"

    def test_parameter_value_instances_accepted(self):
        record = full_record()
        out = modify_output_parameter(record, "flag", ParameterValue("false"))
        assert out.output_parameters["flag"] == ParameterValue("false", TypeTag.BOOL)

    def test_replacement_must_parse_under_existing_tag(self):
        record = full_record()
        with pytest.raises(Exception):
            modify_output_parameter(record, "flag", "not-a-bool")

    def test_guards(self):
        running = full_record(phase=Phase.RUNNING)
        with pytest.raises(IllegalPhaseTransition):
            modify_output_parameter(running, "out", "[1]")
        record = full_record()
        with pytest.raises(UnknownOutput):
            modify_output_parameter(record, "ghost", "x")
        with pytest.raises(TypeMismatch):
            modify_output_parameter(record, "out", 5)

    def test_artifact_replacement_preserves_optional_flag(self):
        record = full_record()
        out = modify_output_artifact(record, "result", "elsewhere/result")
        assert out.output_artifacts["result"] == ArtifactValue(
            "elsewhere/result", optional=True
        )
        out = modify_output_artifact(record, "result", ArtifactValue("k2"))
        assert out.output_artifacts["result"].location == "k2"

    def test_artifact_guards(self):
        record = full_record()
        with pytest.raises(UnknownOutput):
            modify_output_artifact(record, "ghost", "k")
        with pytest.raises(TypeMismatch):
            modify_output_artifact(record, "result", "")
        with pytest.raises(IllegalPhaseTransition):
            modify_output_artifact(full_record(phase=Phase.FAILED), "result", "k")
