"""Structured error types shared across the toolkit.

Every failure the pipeline can produce deliberately maps to one of these, so
the CLI can emit a machine-readable error object and pick the right exit code.
"""

from __future__ import annotations


class PoisonTraceError(Exception):
    """Base class for all toolkit errors."""

    def to_json(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ContractViolation(PoisonTraceError):
    """A caller-supplied value violates a documented precondition."""


class FormatError(PoisonTraceError):
    """A serialized artifact is malformed: bad magic, unknown version, truncation."""


class TrainingDivergence(PoisonTraceError):
    """NaN or infinity appeared in weights or loss during optimization."""

    def __init__(self, message: str, *, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch

    def to_json(self) -> dict:
        out = super().to_json()
        out["epoch"] = self.epoch
        out["batch"] = self.batch
        return out


class NoSuccessfulEvent(PoisonTraceError):
    """No candidate input produced the requested misclassification."""


class EventNotReproduced(PoisonTraceError):
    """The model under analysis does not actually misclassify the event input."""
