"""Exception taxonomy shared across toolflow modules."""


class ToolflowError(Exception):
    """Base class for all toolflow errors."""


# --- toolset ---------------------------------------------------------------

class ToolsetError(ToolflowError):
    pass


class NoFunctionFound(ToolsetError):
    pass


class MultipleFunctions(ToolsetError):
    pass


class MissingDoc(ToolsetError):
    pass


class SourceSyntaxError(ToolsetError):
    """The function source does not parse."""


class DuplicateName(ToolsetError):
    pass


class DanglingLink(ToolsetError):
    """A question references a function id that is not in the toolset."""


# --- retrieval -------------------------------------------------------------

class RetrievalError(ToolflowError):
    pass


class BackendFailure(RetrievalError):
    """Embedding backend failed; message carries the offending item id."""


class DimensionMismatch(RetrievalError):
    pass


class StaleIndex(RetrievalError):
    """Index was built against a different toolset version."""


# --- gateway ---------------------------------------------------------------

class GatewayError(ToolflowError):
    pass


class UnknownTemplate(GatewayError):
    pass


class MissingSlot(GatewayError):
    pass


class ExtraSlot(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class RateLimited(GatewayError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedResponse(GatewayError):
    pass


class ReplayMiss(GatewayError):
    """Replay backend has no recorded completion for this prompt key."""


# --- pipeline / sandbox ----------------------------------------------------

class NoProgramFound(ToolflowError):
    """A completion contained no code block."""


class NoProgramSegments(ToolflowError):
    pass


class RunnerUnavailable(ToolflowError):
    """No conforming guest runner is configured or discoverable."""


# --- corpus ----------------------------------------------------------------

class ParseFailure(ToolflowError):
    """A structured completion lacked required sections."""


class AllAttemptsFailed(ToolflowError):
    """Every generation attempt for a question failed to produce a correct solution."""

    def __init__(self, message: str, attempts: list | None = None):
        super().__init__(message)
        self.attempts = attempts or []


# --- benchbuilder ----------------------------------------------------------

class MissingDerivationLinks(ToolflowError):
    pass


class InsufficientPool(ToolflowError):
    """Not enough non-positive candidates to backfill an adjusted retrieval list."""


class WrongOutcomeCount(ToolflowError):
    pass


# --- config ----------------------------------------------------------------

class ConfigError(ToolflowError):
    pass


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass
