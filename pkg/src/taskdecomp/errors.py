"""Exception hierarchy.

Configuration problems derive from ``ConfigError`` so the CLI can map them to
a single exit code; run-time failures carry whatever telemetry exists.
"""

from __future__ import annotations

from typing import Any


class TaskDecompError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TaskDecompError):
    """A pipeline, script, or injection document is unusable."""


class ParseError(ConfigError):
    """Document is not well-formed."""


class SpecError(ConfigError):
    """Document is well-formed but violates an invariant."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class CycleError(ConfigError):
    def __init__(self, cycle: list[str]) -> None:
        super().__init__("cycle: " + " -> ".join([*cycle, cycle[0]]))
        self.cycle = cycle


class UnknownSubtask(ConfigError, KeyError):
    def __init__(self, subtask_id: str) -> None:
        super().__init__(f"unknown subtask {subtask_id!r}")
        self.subtask_id = subtask_id

    def __str__(self) -> str:
        return self.args[0]


class PathNotFound(ConfigError):
    """Injection path does not exist in the value it targets."""


class ScriptMiss(ConfigError):
    def __init__(self, key: tuple[str, int]) -> None:
        super().__init__(f"mock script has no entry for {key[0]!r} attempt {key[1]}")
        self.key = key


class NoParsableValue(TaskDecompError, ValueError):
    """Raw model output contains no JSON value."""


class PreconditionViolated(TaskDecompError, ValueError):
    pass


# state store


class StateError(TaskDecompError):
    pass


class AlreadyCompleted(StateError):
    pass


class InvalidTransition(StateError):
    pass


class NotCompleted(StateError, LookupError):
    pass


class MissingRequiredInput(StateError):
    def __init__(self, key: str, source: str, status: str) -> None:
        super().__init__(f"required input {key!r} from {source!r} is {status}")
        self.key = key
        self.source = source
        self.status = status


# execution


class TransportError(TaskDecompError):
    """Backend could not be reached; never counted as a validation failure."""


class HardFailure(TaskDecompError):
    """A run could not recover; ``report`` holds the partial telemetry and
    ``store`` the run's final state (decomposed strategies only)."""

    def __init__(self, message: str, report: Any = None, store: Any = None) -> None:
        super().__init__(message)
        self.report = report
        self.store = store


class MixedConfig(TaskDecompError, ValueError):
    pass
