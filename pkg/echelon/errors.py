"""Error taxonomy shared by all echelon modules.

Every error subclasses the builtin a caller would naturally catch
(``ValueError`` for bad inputs, ``RuntimeError`` for lifecycle problems), so
code that only knows about builtins keeps working. Missing files are reported
with the builtin ``FileNotFoundError`` naming the path.
"""

from __future__ import annotations

from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value, unknown key, or malformed override."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class FormatError(ValueError):
    """A persisted artifact (table, checkpoint, bundle) is malformed."""


class ProtocolError(RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimization.

    ``checkpoint`` holds the last parameters known to be finite, when the
    caller had one to offer.
    """

    def __init__(self, message: str, *, parameter: str | None = None, checkpoint: Any = None):
        super().__init__(message)
        self.parameter = parameter
        self.checkpoint = checkpoint
