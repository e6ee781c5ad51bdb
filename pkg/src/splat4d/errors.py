"""Shared exception types."""


class ValidationError(ValueError):
    """Schema or precondition violation in user-supplied inputs (exit code 2)."""


class GuidanceError(RuntimeError):
    """A guidance/edit backend call failed; carries endpoint and status context."""

    def __init__(self, message: str, endpoint: str | None = None, status: int | None = None):
        super().__init__(message)
        self.endpoint = endpoint
        self.status = status
