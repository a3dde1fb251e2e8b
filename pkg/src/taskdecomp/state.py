"""Validation-gated state for a single run.

Only outputs that passed their schema are readable.  The static strategy is
the one exception the engine makes: it forwards an unvalidated value through
``assemble_context(..., allow_unvalidated=True)``, which is exactly the
behaviour the gated strategies are compared against.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    AlreadyCompleted,
    InvalidTransition,
    MissingRequiredInput,
    NotCompleted,
    UnknownSubtask,
)
from .pipeline import ROOT, SubtaskSpec
from .schema import JsonValue, serialize


class SubtaskStatus(str, Enum):
    PENDING = "pending"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class StateEntry:
    status: SubtaskStatus = SubtaskStatus.PENDING
    value: JsonValue = None
    attempts: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    low_content: bool = False
    # static strategy only: parsed output of a failed attempt, never returned by read()
    unvalidated: JsonValue = None
    has_unvalidated: bool = False

    def to_record(self, subtask_id: str) -> dict[str, Any]:
        return {
            "subtask_id": subtask_id,
            "status": self.status.value,
            "attempts": self.attempts,
            "tokens": self.prompt_tokens + self.completion_tokens,
            "value": self.value if self.status is SubtaskStatus.COMPLETED else None,
        }


class StateStore:
    """Per-run store of subtask results keyed by subtask id."""

    def __init__(self, subtask_ids: Iterable[str], root_inputs: Mapping[str, str] | None = None,
                 record_path: str | Path | None = None) -> None:
        self._entries: dict[str, StateEntry] = {sid: StateEntry() for sid in subtask_ids}
        self.root_inputs = dict(root_inputs or {})
        self._lock = threading.Lock()
        self._record_path = Path(record_path) if record_path else None

    # -- queries --------------------------------------------------------

    def entry(self, subtask_id: str) -> StateEntry:
        try:
            return self._entries[subtask_id]
        except KeyError:
            raise UnknownSubtask(subtask_id) from None

    def status(self, subtask_id: str) -> SubtaskStatus:
        return self.entry(subtask_id).status

    def read(self, subtask_id: str) -> JsonValue:
        entry = self._entries.get(subtask_id)
        if entry is None or entry.status is not SubtaskStatus.COMPLETED:
            status = "unknown" if entry is None else entry.status.value
            raise NotCompleted(f"{subtask_id!r} is {status}")
        return entry.value

    def snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return [e.to_record(sid) for sid, e in self._entries.items()]

    # -- transitions ----------------------------------------------------

    def _set(self, subtask_id: str, entry: StateEntry) -> None:
        self._entries[subtask_id] = entry
        if self._record_path is not None:
            with self._record_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"record": "state", **entry.to_record(subtask_id)}) + "\n")

    def write_validated(self, subtask_id: str, value: JsonValue, *, attempts: int,
                        prompt_tokens: int = 0, completion_tokens: int = 0,
                        low_content: bool = False) -> StateEntry:
        with self._lock:
            current = self.entry(subtask_id)
            if current.status is SubtaskStatus.COMPLETED:
                raise AlreadyCompleted(f"{subtask_id!r} already completed")
            if current.status is not SubtaskStatus.PENDING:
                raise InvalidTransition(f"{subtask_id!r}: {current.status.value} -> completed")
            entry = StateEntry(
                status=SubtaskStatus.COMPLETED,
                value=value,
                attempts=max(attempts, 1),
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
                low_content=low_content,
            )
            self._set(subtask_id, entry)
            return entry

    def mark(self, subtask_id: str, status: SubtaskStatus, *, attempts: int | None = None,
             unvalidated: JsonValue = None, has_unvalidated: bool = False) -> StateEntry:
        if status not in (SubtaskStatus.FAILED, SubtaskStatus.SKIPPED):
            raise InvalidTransition(f"mark() only records failed or skipped, not {status.value}")
        with self._lock:
            current = self.entry(subtask_id)
            if current.status is not SubtaskStatus.PENDING:
                raise InvalidTransition(f"{subtask_id!r}: {current.status.value} -> {status.value}")
            n = current.attempts if attempts is None else attempts
            if status is SubtaskStatus.FAILED:
                n = max(n, 1)
            entry = StateEntry(status=status, attempts=n, unvalidated=unvalidated,
                               has_unvalidated=has_unvalidated)
            self._set(subtask_id, entry)
            return entry

    def reopen(self, subtask_id: str) -> StateEntry:
        """Return a finished subtask to pending so a retry can overwrite it.

        Attempt counts carry over; this is the only way out of a terminal status
        and only the engine's retry path uses it.
        """
        with self._lock:
            current = self.entry(subtask_id)
            entry = replace(current, status=SubtaskStatus.PENDING, value=None)
            self._entries[subtask_id] = entry
            return entry

    # -- context --------------------------------------------------------

    def assemble_context(self, subtask: SubtaskSpec, *, allow_unvalidated: bool = False) -> dict[str, str]:
        """The declared inputs of ``subtask`` as prompt-ready text.

        Optional inputs whose source did not complete are omitted; nothing
        beyond the declared keys is ever included.
        """
        return inputs_as_text(subtask, self.assemble_inputs(subtask, allow_unvalidated=allow_unvalidated))

    def assemble_inputs(self, subtask: SubtaskSpec, *, allow_unvalidated: bool = False) -> dict[str, Any]:
        """Like :meth:`assemble_context` but upstream outputs stay parsed."""
        context: dict[str, Any] = {}
        for k in subtask.input_keys:
            if k.source == ROOT:
                context[k.key] = self.root_inputs[k.key]
                continue
            entry = self.entry(k.source)
            if entry.status is SubtaskStatus.COMPLETED:
                context[k.key] = entry.value
            elif allow_unvalidated and entry.has_unvalidated:
                context[k.key] = entry.unvalidated
            elif k.required:
                raise MissingRequiredInput(k.key, k.source, entry.status.value)
        return context


def inputs_as_text(subtask: SubtaskSpec, inputs: Mapping[str, Any]) -> dict[str, str]:
    sources = {k.key: k.source for k in subtask.input_keys}
    return {
        key: value if sources[key] == ROOT and isinstance(value, str) else serialize(value)
        for key, value in inputs.items()
    }
