"""Exception types shared across the toolkit."""

from __future__ import annotations


class HandContactError(Exception):
    """Base class for all toolkit errors."""


class DataError(HandContactError):
    """Invalid or inconsistent data (bad files, broken invariants)."""


class AnnotationFormatError(DataError):
    """A malformed annotation/parse record; carries line number and field."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} [{', '.join(where)}]" if where else message)


class ReconstructionError(HandContactError):
    """A mesh reconstructor failed on one of the rotated copies."""

    def __init__(self, angle_deg: float, message: str = ""):
        self.angle_deg = angle_deg
        detail = f": {message}" if message else ""
        super().__init__(f"reconstructor failed on the copy rotated by {angle_deg} deg{detail}")


class EventExcluded(HandContactError):
    """A contact event was rejected by a gate; ``reason`` is a stable code."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"event excluded: {reason}")


class TrainingError(HandContactError):
    """Training aborted (non-finite loss, unresolvable image, bad config)."""
