"""Exception types shared across the pipeline."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for every error raised by this package."""


# --- dataset / manifest ---

class MissingFile(PipelineError):
    pass


class SchemaError(PipelineError):
    """Malformed manifest record; carries a line locator."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IntegrityError(PipelineError):
    pass


class InsufficientAnimals(PipelineError):
    pass


class InsufficientImages(PipelineError):
    pass


class DegeneratePartition(PipelineError):
    pass


# --- prompting ---

class EmptyField(PipelineError):
    pass


class OverlapError(PipelineError):
    pass


class EmptyBatch(PipelineError):
    pass


class UnreadableFile(PipelineError):
    pass


class UnsupportedFormat(PipelineError):
    pass


class CaptionError(PipelineError):
    """Caption text violates the 1-3 sentence rule or is empty."""


# --- response parsing ---

class MalformedBlock(PipelineError):
    pass


class MissingField(PipelineError):
    pass


class UnknownClass(PipelineError):
    pass


# --- gateway ---

class GatewayError(PipelineError):
    pass


class AuthError(GatewayError):
    """Credential rejected; never retried."""


class PayloadTooLarge(GatewayError):
    """Request body over the provider limit; never retried."""


class ScriptGap(GatewayError):
    """A scripted provider received a request its script does not cover."""


class Exhausted(GatewayError):
    """Retries spent; carries the last underlying cause."""

    def __init__(self, message: str, cause: Exception | None = None, attempt_count: int = 0):
        self.cause = cause
        self.attempt_count = attempt_count
        super().__init__(message)


# --- tuning state machine ---

class StateError(PipelineError):
    """An operation was invoked out of order for the current run state."""


class RoundCapReached(StateError):
    pass


class PendingReviewsExist(StateError):
    pass


class NotFinalized(StateError):
    pass


class NoSuchPending(PipelineError):
    pass


class IncorrectItemPromotion(PipelineError):
    pass


class UnverifiedInitialCaption(PipelineError):
    pass


class GatewayFailure(PipelineError):
    """A round could not complete because the gateway failed; state unchanged."""

    def __init__(self, message: str, cause: Exception | None = None):
        self.cause = cause
        super().__init__(message)


# --- review service ---

class UnknownRun(PipelineError):
    pass


class ConflictError(PipelineError):
    pass


# --- inference / aggregation ---

class EmptyTestCohort(PipelineError):
    pass


class IncompleteResults(PipelineError):
    pass


class EmptyReport(PipelineError):
    pass


class NonpositiveBaseline(PipelineError):
    pass
