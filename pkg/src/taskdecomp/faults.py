"""Single-shot fault injection: remove one field at one (subtask, attempt)."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

from . import valuepath
from .errors import ConfigError, NoParsableValue, PathNotFound
from .pipeline import ROOT, PipelineSpec
from .schema import parse_value, serialize


class InjectionMode(str, Enum):
    DROP_FIELD = "drop_field"  # applied to the target's assembled inputs
    CORRUPT_RESPONSE = "corrupt_response"  # applied to the target's raw output


@dataclass(frozen=True)
class InjectionSpec:
    target_subtask: str
    path: str
    mode: InjectionMode = InjectionMode.DROP_FIELD
    attempt: int = 1

    def __post_init__(self) -> None:
        if not self.path or self.path == "$":
            raise ConfigError("injection path must name a field")
        try:
            valuepath.parse_path(self.path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.attempt < 1:
            raise ConfigError("injection attempt must be >= 1")

    def check_against(self, pipeline: PipelineSpec) -> "InjectionSpec":
        pipeline.subtask(self.target_subtask)
        if self.mode is InjectionMode.DROP_FIELD:
            key = _input_key_of(self.path)
            sub = pipeline.subtask(self.target_subtask)
            if key not in {k.key for k in sub.input_keys}:
                raise ConfigError(f"{self.target_subtask!r} has no input {key!r} to corrupt")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {"target": self.target_subtask, "attempt": self.attempt, "mode": self.mode.value, "path": self.path}


def parse_injection(tokens: Sequence[str] | str) -> InjectionSpec:
    """Parse ``target=<id> attempt=<n> mode=<drop_field|corrupt_response> path=<value-path>``."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    fields: dict[str, str] = {}
    for tok in tokens:
        name, sep, value = tok.partition("=")
        if not sep or name not in {"target", "attempt", "mode", "path"}:
            raise ConfigError(f"bad injection token {tok!r}")
        fields[name] = value
    if "target" not in fields or "path" not in fields:
        raise ConfigError("injection needs target=<id> and path=<value-path>")
    try:
        mode = InjectionMode(fields.get("mode", InjectionMode.DROP_FIELD.value))
        attempt = int(fields.get("attempt", "1"))
    except ValueError as exc:
        raise ConfigError(f"bad injection: {exc}") from None
    return InjectionSpec(fields["target"], fields["path"], mode, attempt)


def should_inject(spec: InjectionSpec | None, subtask: str, attempt: int) -> bool:
    return spec is not None and spec.target_subtask == subtask and spec.attempt == attempt


def apply(spec: InjectionSpec, value: Any) -> Any:
    """Remove the field at ``spec.path``.

    ``value`` is the assembled-input mapping for ``drop_field`` and the raw
    response text for ``corrupt_response`` (re-serialized after the drop).
    """
    if spec.mode is InjectionMode.CORRUPT_RESPONSE and isinstance(value, str):
        try:
            parsed = parse_value(value)
        except NoParsableValue:
            raise PathNotFound(f"{spec.path}: response is not JSON") from None
        return serialize(_drop(parsed, spec.path))
    return _drop(value, spec.path)


def _drop(value: Any, path: str) -> Any:
    try:
        return valuepath.delete(value, path)
    except KeyError:
        raise PathNotFound(f"injection path {path} not found") from None


def _input_key_of(path: str) -> str:
    steps = valuepath.parse_path(path)
    if not steps or not isinstance(steps[0], str):
        raise ConfigError(f"drop_field path must start with an input key: {path}")
    return steps[0]


def monolithic_path(spec: InjectionSpec, pipeline: PipelineSpec) -> str:
    """Where the same fault lands in a monolithic output keyed by subtask id.

    ``drop_field`` corrupts the producer of the named input, so the path is
    re-rooted at that producer; ``corrupt_response`` is re-rooted at the target.
    """
    steps = valuepath.parse_path(spec.path)
    if spec.mode is InjectionMode.CORRUPT_RESPONSE:
        return valuepath.format_path((spec.target_subtask, *steps))
    sub = pipeline.subtask(spec.target_subtask)
    source = next(k.source for k in sub.input_keys if k.key == steps[0])
    if source == ROOT:
        raise ConfigError("a root input cannot be corrupted in a monolithic run")
    return valuepath.format_path((source, *steps[1:]))
