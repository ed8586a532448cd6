"""Exception hierarchy shared across the package."""


class AgacciError(Exception):
    """Base class for all package errors."""


# --- document / schema errors ---------------------------------------------

class MalformedDocument(AgacciError):
    """Input is not valid structured text (or exceeds size limits)."""


class UnsupportedFormat(AgacciError):
    """Notebook major format version is not supported."""


class EmptyNotebook(AgacciError):
    """Notebook contains zero cells."""


class SchemaViolation(AgacciError):
    """Structured payload does not satisfy its schema contract."""


class MalformedScore(AgacciError):
    """Score string has the wrong length or alphabet."""


# --- backend errors --------------------------------------------------------

class BackendError(AgacciError):
    """Base class for chat-backend failures."""


class AuthError(BackendError):
    """Missing or rejected credentials (401/403, or unset key env var)."""


class RateLimited(BackendError):
    """HTTP 429 persisting after the retry budget."""


class TransportError(BackendError):
    """Network-level failure persisting after the retry budget."""


class BadRequest(BackendError):
    """HTTP 400; carries the server's message."""


class EmptyCompletion(BackendError):
    """Backend returned a choice with no text."""


class TapeMiss(BackendError):
    """Replay tape has no entry matching the request fingerprint."""


# --- agent / pipeline errors ----------------------------------------------

class MissingPlaceholder(AgacciError):
    """Prompt context lacks a placeholder the template uses."""

    def __init__(self, name: str):
        super().__init__(f"missing placeholder: {name}")
        self.name = name


class UnparseableVerdict(AgacciError):
    """Agent response could not be parsed into its output contract."""


class PipelineError(AgacciError):
    """Wraps a stage failure with its stage label and run id."""

    def __init__(self, stage: str, run_id: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed in run {run_id}: {cause}")
        self.stage = stage
        self.run_id = run_id
        self.cause = cause


# --- metrics errors --------------------------------------------------------

class LengthMismatch(AgacciError):
    """Prediction and truth bit vectors differ in length."""


class InsufficientRounds(AgacciError):
    """Standard deviation requested with fewer than two rounds."""


class NoValidScores(AgacciError):
    """Every judge repeat was discarded as unparseable or out of range."""
