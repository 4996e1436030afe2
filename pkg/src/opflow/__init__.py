"""opflow: a workflow orchestration engine.

Workflows are written as typed operation templates (scripts, sequential
Steps, or DAGs), validated statically, and executed by a local scheduler
with sliced fan-out, retry and continuation policies, pluggable executors,
content-addressed artifact storage, and keyed restart-with-reuse.  The
package is usable as a library, as an HTTP service, and through the
``opflow`` command line client.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import OpflowError, ValidationFailed
from .model import (
    ArtifactSpec,
    ArtifactValue,
    DagTemplate,
    GlobalInputs,
    LiteralRef,
    ItemFieldRef,
    ItemRef,
    ParameterSpec,
    ParameterValue,
    Phase,
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
    typecheck_io,
)
from .scheduler import Clock, Engine, RunConfig, WorkflowResult
from .specdoc import dump_spec_text, load_spec_file, load_spec_text
from .validation import ValidationReport, validate_workflow

__all__ = [
    "OpflowError",
    "ValidationFailed",
    "Clock",
    "Engine",
    "RunConfig",
    "WorkflowResult",
    "dump_spec_text",
    "load_spec_file",
    "load_spec_text",
    "ValidationReport",
    "validate_workflow",
    "ArtifactSpec",
    "ArtifactValue",
    "DagTemplate",
    "GlobalInputs",
    "LiteralRef",
    "ItemFieldRef",
    "ItemRef",
    "ParameterSpec",
    "ParameterValue",
    "Phase",
    "RetryPolicy",
    "ScriptTemplate",
    "Signature",
    "SlicesConfig",
    "StepDef",
    "StepOutputRef",
    "StepsTemplate",
    "TemplateInputRef",
    "TypeTag",
    "WorkflowInputRef",
    "WorkflowSpec",
    "typecheck_io",
    "__version__",
]
