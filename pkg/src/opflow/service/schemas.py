"""Request and response bodies for the opflow HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..model import StepRecord


class SubmitRequest(BaseModel):
    """Submit a workflow document for execution."""

    spec_text: str
    parameters: dict[str, str] = Field(default_factory=dict)
    parallelism: int | None = Field(default=None, ge=1)
    sequential: bool = False
    reuse_from: str | None = None
    # restrict harvesting to these keys; empty means every reusable record
    reuse_keys: list[str] = Field(default_factory=list)


class SubmitResponse(BaseModel):
    workflow_id: str


class WorkflowView(BaseModel):
    workflow_id: str
    phase: str


class FailureView(BaseModel):
    kind: str
    message: str


class ParameterView(BaseModel):
    text: str
    type_tag: str


class StepView(BaseModel):
    """One step record as the API reports it."""

    key: str
    name: str
    template: str
    type: str
    phase: str
    attempt: int
    key_source: str
    parent: str | None = None
    slice_index: int | None = None
    started_at: float | None = None
    ended_at: float | None = None
    duration: float | None = None
    failure: FailureView | None = None
    input_parameters: dict[str, ParameterView] = Field(default_factory=dict)
    output_parameters: dict[str, ParameterView] = Field(default_factory=dict)
    input_artifacts: dict[str, str] = Field(default_factory=dict)
    output_artifacts: dict[str, str] = Field(default_factory=dict)
    dag_edges: list[tuple[str, str]] = Field(default_factory=list)

    @classmethod
    def from_record(cls, record: StepRecord) -> "StepView":
        return cls(
            key=record.key,
            name=record.name,
            template=record.template,
            type=record.type_word,
            phase=record.phase.value,
            attempt=record.attempt,
            key_source=record.key_source,
            parent=record.parent,
            slice_index=record.slice_index,
            started_at=record.started_at,
            ended_at=record.ended_at,
            duration=record.duration,
            failure=(
                FailureView(kind=record.failure.kind, message=record.failure.message)
                if record.failure
                else None
            ),
            input_parameters={
                name: ParameterView(text=value.text, type_tag=value.type_tag.value)
                for name, value in record.input_parameters.items()
            },
            output_parameters={
                name: ParameterView(text=value.text, type_tag=value.type_tag.value)
                for name, value in record.output_parameters.items()
            },
            input_artifacts={
                name: value.location
                for name, value in record.input_artifacts.items()
            },
            output_artifacts={
                name: value.location
                for name, value in record.output_artifacts.items()
            },
            dag_edges=[tuple(edge) for edge in record.dag_edges or ()],
        )


class ValidateRequest(BaseModel):
    spec_text: str
    parameters: dict[str, str] = Field(default_factory=dict)


class DiagnosticView(BaseModel):
    location: str
    message: str


class ValidateResponse(BaseModel):
    ok: bool
    errors: list[DiagnosticView] = Field(default_factory=list)
    warnings: list[DiagnosticView] = Field(default_factory=list)


class RetryRequest(BaseModel):
    parallelism: int | None = Field(default=None, ge=1)
    sequential: bool = False


class RetryResponse(BaseModel):
    workflow_id: str
