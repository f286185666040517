"""
Error types for panodepth.

Every failure raised by the library derives from PanoDepthError so callers
(and the CLI) can catch one base class. Precondition failures also derive
from ValueError, which keeps plain `except ValueError` call sites working.
"""

from typing import Optional


class PanoDepthError(Exception):
    """Base class for all panodepth errors."""


class ArgumentError(PanoDepthError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class DomainError(ArgumentError):
    """A valid pixel carries a depth outside (0, inf)."""


class EmptyOverlapError(ArgumentError):
    """A loss found no jointly valid pixels to average over."""


class EmptyEvaluationError(ArgumentError):
    """Every pixel was removed by an evaluation filter."""

    def __init__(self, filter_name: str, message: Optional[str] = None):
        self.filter_name = filter_name
        super().__init__(message or f"No pixels left after the {filter_name} filter.")


class CoverageError(ArgumentError):
    """The requested camera rig leaves parts of the sphere unobserved."""


class FormatError(PanoDepthError):
    """A file could not be parsed."""

    def __init__(self, message: str, path=None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        location = ""
        if path is not None:
            location = f" ({path}"
            location += f" at byte {offset})" if offset is not None else ")"
        super().__init__(f"{message}{location}")


class ConfigError(PanoDepthError):
    """A configuration file or mapping violates its schema."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class StageFailure(PanoDepthError):
    """An external labeler/scorer process or a pipeline stage failed."""

    def __init__(
        self,
        stage: str,
        message: str,
        command: Optional[str] = None,
        returncode: Optional[int] = None,
        stdout: str = "",
        stderr: str = "",
    ):
        self.stage = stage
        self.command = command
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr
        detail = f"[{stage}] {message}"
        if returncode is not None:
            detail += f" (exit code {returncode})"
        if stderr.strip():
            detail += f"\n--- stderr ---\n{stderr.strip()}"
        super().__init__(detail)
