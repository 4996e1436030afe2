"""HTTP surface of the engine.

Error mapping: spec problems answer 422 with the full diagnostic list,
unknown ids answer 404, and operations that need a finished workflow answer
409.  Everything the CLI does goes through these routes.
"""

from __future__ import annotations

from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from ..config import opflow_home
from ..errors import (
    OpflowError,
    SpecLoadError,
    UnknownStep,
    UnknownWorkflow,
    ValidationFailed,
    WorkflowStillRunning,
)
from ..scheduler import RunConfig
from .manager import RunManager
from .schemas import (
    DiagnosticView,
    RetryRequest,
    RetryResponse,
    StepView,
    SubmitRequest,
    SubmitResponse,
    ValidateRequest,
    ValidateResponse,
    WorkflowView,
)

API_PREFIX = "/api/v1"


def create_app(
    home: str | Path | None = None,
    *,
    manager: RunManager | None = None,
    default_config: RunConfig | None = None,
) -> FastAPI:
    """Build the service for one data directory.

    Tests inject a prebuilt manager; otherwise one is created against
    ``home`` (or $OPFLOW_HOME / ~/.opflow) when the app starts.
    """
    state: dict[str, RunManager] = {}
    if manager is not None:
        state["manager"] = manager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if "manager" not in state:
            state["manager"] = RunManager(
                opflow_home(home), default_config=default_config
            )
        state["manager"].sweep_orphans()
        yield

    app = FastAPI(title="opflow", lifespan=lifespan)

    def mgr() -> RunManager:
        return state["manager"]

    # -- error mapping

    @app.exception_handler(ValidationFailed)
    async def _invalid(request: Request, exc: ValidationFailed) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={
                "detail": "spec validation failed",
                "errors": [
                    {"location": d.location, "message": d.message}
                    for d in exc.report.errors()
                ],
            },
        )

    @app.exception_handler(SpecLoadError)
    async def _unparsable(request: Request, exc: SpecLoadError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={
                "detail": "spec did not parse",
                "errors": [{"location": "document", "message": str(exc)}],
            },
        )

    @app.exception_handler(UnknownWorkflow)
    @app.exception_handler(UnknownStep)
    async def _missing(request: Request, exc: OpflowError) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(WorkflowStillRunning)
    async def _conflict(request: Request, exc: OpflowError) -> JSONResponse:
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    # -- routes

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post(
        f"{API_PREFIX}/workflows", response_model=SubmitResponse, status_code=201
    )
    def submit(request: SubmitRequest) -> SubmitResponse:
        reuse = (
            mgr().harvest(request.reuse_from, request.reuse_keys)
            if request.reuse_from
            else ()
        )
        workflow_id = mgr().submit(
            request.spec_text,
            parameters=request.parameters,
            parallelism=request.parallelism,
            sequential=request.sequential,
            reuse=reuse,
        )
        return SubmitResponse(workflow_id=workflow_id)

    @app.get(f"{API_PREFIX}/workflows", response_model=list[WorkflowView])
    def workflows() -> list[WorkflowView]:
        return [
            WorkflowView(workflow_id=workflow_id, phase=phase.value)
            for workflow_id, phase in mgr().workflows()
        ]

    @app.get(f"{API_PREFIX}/workflows/{{workflow_id}}", response_model=WorkflowView)
    def status(workflow_id: str) -> WorkflowView:
        phase = mgr().status(workflow_id)
        return WorkflowView(workflow_id=workflow_id, phase=phase.value)

    @app.get(
        f"{API_PREFIX}/workflows/{{workflow_id}}/steps",
        response_model=list[StepView],
    )
    def steps(workflow_id: str, key: str | None = None) -> list[StepView]:
        if key is not None:
            return [StepView.from_record(mgr().step(workflow_id, key))]
        return [StepView.from_record(r) for r in mgr().steps(workflow_id)]

    @app.get(
        f"{API_PREFIX}/workflows/{{workflow_id}}/steps/{{key}}",
        response_model=StepView,
    )
    def step(workflow_id: str, key: str) -> StepView:
        return StepView.from_record(mgr().step(workflow_id, key))

    @app.get(f"{API_PREFIX}/workflows/{{workflow_id}}/steps/{{key}}/log")
    def step_log(workflow_id: str, key: str, offset: int = 0) -> PlainTextResponse:
        return PlainTextResponse(mgr().step_log(workflow_id, key, offset))

    @app.post(
        f"{API_PREFIX}/workflows/{{workflow_id}}/retry",
        response_model=RetryResponse,
        status_code=201,
    )
    def retry(workflow_id: str, request: RetryRequest | None = None) -> RetryResponse:
        request = request or RetryRequest()
        new_id = mgr().retry(
            workflow_id,
            parallelism=request.parallelism,
            sequential=request.sequential,
        )
        return RetryResponse(workflow_id=new_id)

    @app.post(f"{API_PREFIX}/validate", response_model=ValidateResponse)
    def validate(request: ValidateRequest) -> ValidateResponse:
        try:
            report = mgr().validate(request.spec_text, request.parameters)
        except SpecLoadError as exc:
            return ValidateResponse(
                ok=False,
                errors=[DiagnosticView(location="document", message=str(exc))],
            )
        return ValidateResponse(
            ok=report.ok,
            errors=[
                DiagnosticView(location=d.location, message=d.message)
                for d in report.errors()
            ],
            warnings=[
                DiagnosticView(location=d.location, message=d.message)
                for d in report.warnings()
            ],
        )

    return app
