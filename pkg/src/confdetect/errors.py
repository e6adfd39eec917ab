"""Error categories shared by every confdetect module.

The CLI maps these onto process exit codes (see ``EXIT_CODES``).
"""

from __future__ import annotations


class ConfdetectError(Exception):
    """Base class for all errors raised by confdetect."""


class InvalidInputError(ConfdetectError, ValueError):
    """Raised when an argument violates a documented precondition (shape, range, size)."""


class NumericError(ConfdetectError, ArithmeticError):
    """Raised when a computation produces non-finite values.

    The message names where it happened (batch index, image index, epoch/step).
    """


class ConfigError(ConfdetectError):
    """Raised for invalid or inconsistent configuration."""

    def __init__(self, problems: list[str] | str) -> None:
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


class MissingPrerequisiteError(ConfdetectError):
    """Raised when an artifact another command produces is missing."""

    def __init__(self, missing: list[tuple[str, str]]) -> None:
        # (path, command that produces it)
        self.missing = missing
        lines = [f"{path} (run '{command}')" for path, command in missing]
        super().__init__("missing prerequisites: " + ", ".join(lines))


class RegistrationError(ConfdetectError):
    """Raised when an attack name is registered twice or is unknown."""


class CheckpointLoadError(ConfdetectError):
    """Raised when a checkpoint is missing, truncated or architecture-incompatible."""


class PreconditionError(ConfdetectError):
    """Raised when a model is in the wrong mode for the requested operation."""


class ArchiveError(ConfdetectError):
    """Raised when an adversarial archive is malformed or inconsistent."""


EXIT_CODES: dict[type[ConfdetectError], int] = {
    ConfigError: 2,
    MissingPrerequisiteError: 3,
    NumericError: 4,
}


def exit_code_for(exc: ConfdetectError) -> int:
    """Return the process exit code for a domain error (1 when uncategorised)."""
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1
