"""Exception types shared across the toolkit.

Every error raised by the public API derives from :class:`ToolkitError`, so
callers (CLI, service, batch drivers) can trap toolkit failures without
catching unrelated bugs. Transport, parse, and not-found failures are distinct
classes because clients are required to keep them distinguishable.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(ToolkitError):
    """A precondition on an argument was violated."""


class SequenceTooShortError(InvalidInputError):
    """A token sequence has too few non-EOS tokens for the requested edit."""


class CoTParseError(ToolkitError):
    """A length-first caption string failed to parse.

    ``component`` names the offending part: "bracket", "separator", "length",
    or "description".
    """

    def __init__(self, component: str, message: str) -> None:
        super().__init__(f"{component}: {message}")
        self.component = component


class NotFoundError(ToolkitError):
    """A referenced id, file, or backend does not exist."""


class MismatchError(ToolkitError):
    """Two collections that must align do not; ``ids`` lists the offenders."""

    def __init__(self, message: str, ids: list[str] | None = None) -> None:
        if ids:
            message = f"{message}: {', '.join(sorted(ids))}"
        super().__init__(message)
        self.ids = list(ids or [])


class DimensionError(ToolkitError):
    """An array argument has the wrong shape."""

    def __init__(self, expected, actual, what: str = "array") -> None:
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class TransportError(ToolkitError):
    """A remote call failed at the transport level after all retries."""

    def __init__(self, message: str, attempts: int = 1) -> None:
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class BackendError(ToolkitError):
    """A remote backend answered with a non-retryable error status."""

    def __init__(self, status_code: int, message: str) -> None:
        super().__init__(f"HTTP {status_code}: {message}")
        self.status_code = status_code


class DuplicateRegistrationError(ToolkitError):
    """An id was registered twice in the same registry."""


class HarmfulCaptionError(ToolkitError):
    """A caption with unremoved degradation/photography spans hit the restore gate."""


class AnnotationConflictError(ToolkitError):
    """A pair already carries a different annotation and overwrite was not set."""


class StaleLeaseError(ToolkitError):
    """The submitting annotator does not hold a live lease on the task."""


class ScorerFaultError(ToolkitError):
    """A metric scorer produced a non-finite value."""

    def __init__(self, metric: str, detail: str) -> None:
        super().__init__(f"scorer '{metric}' failed: {detail}")
        self.metric = metric


class UndefinedImprovementError(InvalidInputError):
    """Improvement percentage is undefined for a zero baseline score."""


class ConfigError(ToolkitError):
    """A run configuration is unreadable, incomplete, or inconsistent."""
