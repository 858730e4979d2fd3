"""Exception hierarchy shared by every soundloc module.

Each error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class SoundlocError(Exception):
    exit_code = 1
    kind = "error"


class ContractError(SoundlocError, ValueError):
    """An operation was called outside its preconditions."""

    exit_code = 4
    kind = "contract"


class ValidationError(ContractError):
    """A record violates a type invariant."""

    kind = "validation"

    def __init__(self, message: str, frame_id: str | None = None, field: str | None = None):
        super().__init__(message)
        self.frame_id = frame_id
        self.field = field


class ConfigError(ContractError):
    kind = "config"


class ManifestParseError(ContractError):
    kind = "parse"

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class HeatmapFormatError(SoundlocError, ValueError):
    exit_code = 3
    kind = "format"


class HeatmapLengthError(HeatmapFormatError):
    kind = "length"


class MissingPredictionError(SoundlocError, LookupError):
    exit_code = 3
    kind = "io"

    def __init__(self, frame_ids: list[str]):
        super().__init__("missing predictions for frames: " + ", ".join(frame_ids))
        self.frame_ids = list(frame_ids)
