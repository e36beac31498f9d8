"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AutoformalError(Exception):
    """Base class for every error raised by this package."""


class EmptyTrajectory(AutoformalError):
    pass


class DomainError(AutoformalError, ValueError):
    pass


class UndefinedMetric(AutoformalError, ZeroDivisionError):
    pass


class DegenerateInput(AutoformalError, ValueError):
    pass


class RaggedSamples(AutoformalError, ValueError):
    pass


class UnmappableDiagnostic(AutoformalError):
    pass


class EmptyPanel(AutoformalError, ValueError):
    pass


class PreconditionError(AutoformalError):
    pass


class MalformedToolCall(AutoformalError):
    pass


class UnknownTool(AutoformalError):
    pass


class TerminalState(AutoformalError):
    pass


class SerializationMismatch(AutoformalError):
    pass


class InsufficientCandidates(AutoformalError):
    def __init__(self, message: str, survivors: list | None = None):
        super().__init__(message)
        self.survivors = survivors or []


# Backend faults. The syntax tool branches on the concrete class, so keep them distinct.


class BackendError(AutoformalError):
    retryable = False


class BackendTimeout(BackendError):
    retryable = True


class TransportError(BackendError):
    retryable = True


class ServerError(BackendError):
    retryable = True


class RateLimited(BackendError):
    retryable = True


class ModelRefusal(BackendError):
    retryable = False


class BackendUnavailable(BackendError):
    """Raised once a client has exhausted its retries."""


class ModelUnavailable(BackendUnavailable):
    pass


class JudgeUnavailable(BackendUnavailable):
    pass


class ProviderFailure(BackendError):
    def __init__(self, message: str, indices: list[int] | None = None, item_id: str | None = None):
        super().__init__(message)
        self.indices = indices or []
        self.item_id = item_id


class UnexpectedRequest(BackendError):
    """A strict scripted mock received a request it has no entry for."""


class ConfigError(AutoformalError, ValueError):
    pass
