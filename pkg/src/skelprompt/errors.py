"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SkelPromptError(Exception):
    """Base class for all errors raised by this package."""


class ClipParseError(SkelPromptError):
    """A clip file line could not be decoded."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ClipValidationError(SkelPromptError):
    """A decoded clip violates its invariants."""

    def __init__(self, video_id: str, message: str) -> None:
        super().__init__(f"clip {video_id!r}: {message}")
        self.video_id = video_id


class ShapeError(SkelPromptError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(SkelPromptError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, phase: str = "forward") -> None:
        super().__init__(f"non-finite value in {phase} pass of {op!r}")
        self.op = op
        self.phase = phase


class CheckpointError(SkelPromptError):
    """A checkpoint file is unreadable or inconsistent."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written with an unsupported format version."""


class TrainingDivergedError(SkelPromptError):
    """The training loss became non-finite."""

    def __init__(self, step: int) -> None:
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


class PromptError(SkelPromptError, ValueError):
    """A prompt or prompt-embedding file is unusable."""


class FactorizationError(SkelPromptError):
    """The regularized covariance could not be factorized."""
