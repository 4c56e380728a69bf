"""Exception hierarchy shared by every stage of the toolkit."""

from __future__ import annotations


class SpyWatermarkError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SpyWatermarkError, ValueError):
    """Invalid or inconsistent configuration.

    ``problems`` holds ``(path, reason)`` pairs when several violations were
    collected in one pass.
    """

    def __init__(self, message: str, problems: list[tuple[str, str]] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            detail = "; ".join(f"{p}: {r}" for p, r in self.problems)
            message = f"{message}: {detail}"
        super().__init__(message)


class ShapeError(SpyWatermarkError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(SpyWatermarkError, FloatingPointError):
    """Non-finite values appeared in activations, losses or parameters."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class IngestionError(SpyWatermarkError, OSError):
    """Dataset files are missing or unreadable."""


class IntegrityError(SpyWatermarkError):
    """A checkpoint or artifact failed its integrity check."""


class ConfigMismatchError(SpyWatermarkError):
    """A checkpoint was produced with a different configuration."""


class ContractError(SpyWatermarkError, ValueError):
    """Inputs violate an operation precondition."""


class DependencyError(SpyWatermarkError):
    """A pipeline stage is missing an upstream artifact."""


class StalenessError(SpyWatermarkError):
    """A cached stage was produced with a different configuration."""
