"""Exception hierarchy for the opflow engine.

Every error raised by opflow derives from :class:`OpflowError` so embedders
can catch engine failures with a single except clause.  Subclasses are grouped
by the layer that raises them; the service maps a few of them onto HTTP status
codes and the CLI maps those onto exit codes.
"""

from __future__ import annotations


class OpflowError(Exception):
    """Base class for all opflow errors."""


# ---------------------------------------------------------------------------
# Spec loading and validation


class SpecLoadError(OpflowError):
    """The workflow document could not be parsed into a WorkflowSpec."""


class ValidationFailed(OpflowError):
    """The engine refused to run a spec whose validation report has errors."""

    def __init__(self, report) -> None:
        super().__init__(str(report))
        self.report = report


# ---------------------------------------------------------------------------
# Typed I/O


class TypeMismatch(OpflowError):
    """A value does not parse or serialize under the declared type tag."""


class MissingInput(OpflowError):
    """A required input has no value, no default, and is not optional."""


class UnknownKey(OpflowError):
    """A value was supplied for a name the signature does not declare."""


class ParameterTooLarge(OpflowError):
    """Parameter text exceeds the 1 MiB ceiling."""


class UnresolvedReference(OpflowError):
    """A binding or dependency names a step, task, or output that does not exist."""


# ---------------------------------------------------------------------------
# Expression language


class UnboundPlaceholder(OpflowError):
    """A {{path}} placeholder has no value in the current scope."""


class ExpressionParseError(OpflowError):
    """A condition does not match the expression grammar.

    Carries the byte offset of the first offending character.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExpressionTypeError(OpflowError):
    """Operand kinds are not valid for the operator (e.g. ordering strings)."""


# ---------------------------------------------------------------------------
# Scheduling


class RecursionLimitExceeded(OpflowError):
    """A template instantiated itself past the configured depth limit."""


class SliceLengthMismatch(OpflowError):
    """Sliced inputs of one step have different lengths."""


class SliceError(OpflowError):
    """A sliced input is not a list-shaped parameter or artifact."""


class UnavailableOutput(OpflowError):
    """A binding references an output of a step that was skipped or failed."""


class DuplicateKey(OpflowError):
    """Two live steps in one workflow resolved to the same key."""


# ---------------------------------------------------------------------------
# Execution


class MissingOutputFile(OpflowError):
    """The script exited 0 but a declared output file or path is absent."""


class SubmissionFailed(OpflowError):
    """The batch system refused a job submission."""


class PollTimeout(OpflowError):
    """A submitted job did not reach a terminal state before the deadline."""


class UnknownJobId(OpflowError):
    """Poll was called with a job id the batch system has never seen."""


# ---------------------------------------------------------------------------
# Artifact storage


class StorageError(OpflowError):
    """Base class for storage backend failures."""


class KeyInvalid(StorageError):
    """The artifact key is empty, escapes the root, or has empty segments."""


class KeyMissing(StorageError):
    """No object or prefix exists at the given key."""


class NotAFile(StorageError):
    """A file-only operation (get_md5) was applied to a directory key."""


class SourceMissing(StorageError):
    """upload() was called with a local path that does not exist."""


class UnsupportedOperation(StorageError):
    """The backend does not implement an optional capability."""


# ---------------------------------------------------------------------------
# State store and service


class UnknownWorkflow(OpflowError):
    """No workflow directory exists for the given id."""


class UnknownStep(OpflowError):
    """No step with the given key exists in the workflow."""


class UnknownOutput(OpflowError):
    """modify_output_* named an output the record does not carry."""


class IllegalPhaseTransition(OpflowError):
    """A persisted step may not move between these two phases."""


class WorkflowStillRunning(OpflowError):
    """The operation requires the workflow to be in a terminal phase."""
