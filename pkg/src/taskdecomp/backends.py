"""Model backends: a scripted mock for offline reproduction and a
chat-completions HTTP client.

Both expose ``complete(request, call_key, ctx)``.  ``call_key`` is
``(subtask id or "monolithic", attempt)``; ``ctx`` carries the run index,
seed, and clock of the run making the call.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Union

import httpx

from .clock import Clock, SimulatedClock
from .errors import ConfigError, ParseError, ScriptMiss, TransportError
from .schema import serialize

CallKey = tuple[str, int]


def count_tokens(text: str) -> int:
    """Deterministic token estimate: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ModelRequest:
    model_ref: str
    prompt: str
    temperature: float = 0.0
    max_output_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    model_latency: float


@dataclass
class CallContext:
    run_index: int = 1
    seed: int = 0
    clock: Clock = field(default_factory=SimulatedClock)


class Backend(Protocol):
    def complete(self, request: ModelRequest, call_key: CallKey, ctx: CallContext) -> ModelResponse: ...


Backends = Union[Backend, Mapping[str, Backend]]


def backend_for(backends: Backends, model_ref: str) -> Backend:
    """Look up the backend serving ``model_ref`` (falling back to ``"default"``)."""
    if isinstance(backends, Mapping):
        if model_ref in backends:
            return backends[model_ref]
        if "default" in backends:
            return backends["default"]
        raise ConfigError(f"no backend registered for model_ref {model_ref!r}")
    return backends


# --------------------------------------------------------------------------
# mock


@dataclass(frozen=True)
class ScriptEntry:
    subtask: str
    attempt: int
    response_text: str
    completion_tokens: int | None = None
    total_tokens: int | None = None
    simulated_latency: float = 0.0
    jitter_seed: int | None = None
    jitter_seconds: float = 0.0
    run: int | None = None


_ENTRY_FIELDS = {
    "subtask",
    "attempt",
    "run",
    "response_text",
    "response",
    "completion_tokens",
    "total_tokens",
    "simulated_latency",
    "jitter_seed",
    "jitter_seconds",
}


class MockScript:
    """Scripted responses keyed by ``(subtask, attempt)``.

    Entries carrying a ``run`` index override the generic entry for that run
    only, which is how individual natural failures are scripted.
    """

    def __init__(self, entries: list[ScriptEntry]) -> None:
        self._generic: dict[CallKey, ScriptEntry] = {}
        self._per_run: dict[tuple[str, int, int], ScriptEntry] = {}
        for e in entries:
            if e.run is None:
                if (e.subtask, e.attempt) in self._generic:
                    raise ConfigError(f"duplicate script entry {(e.subtask, e.attempt)}")
                self._generic[(e.subtask, e.attempt)] = e
            else:
                self._per_run[(e.subtask, e.attempt, e.run)] = e
        attempts: dict[str, set[int]] = {}
        for sub, att in self._generic:
            attempts.setdefault(sub, set()).add(att)
        for sub, seen in attempts.items():
            if seen != set(range(1, max(seen) + 1)):
                raise ConfigError(f"script attempts for {sub!r} are not dense from 1: {sorted(seen)}")
        self.entries = list(entries)

    @classmethod
    def from_dict(cls, doc: Any) -> "MockScript":
        if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
            raise ParseError("mock script must be an object with an 'entries' list")
        entries = []
        for i, e in enumerate(doc["entries"]):
            if not isinstance(e, dict):
                raise ParseError(f"entries[{i}] must be an object")
            extra = set(e) - _ENTRY_FIELDS
            if extra:
                raise ConfigError(f"entries[{i}]: unknown fields {sorted(extra)}")
            if ("response" in e) == ("response_text" in e):
                raise ConfigError(f"entries[{i}]: give exactly one of 'response' / 'response_text'")
            text = e["response_text"] if "response_text" in e else serialize(e["response"])
            try:
                entries.append(
                    ScriptEntry(
                        subtask=str(e["subtask"]),
                        attempt=int(e.get("attempt", 1)),
                        response_text=text,
                        completion_tokens=e.get("completion_tokens"),
                        total_tokens=e.get("total_tokens"),
                        simulated_latency=float(e.get("simulated_latency", 0.0)),
                        jitter_seed=e.get("jitter_seed"),
                        jitter_seconds=float(e.get("jitter_seconds", 0.0)),
                        run=e.get("run"),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"entries[{i}]: {exc}") from None
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def lookup(self, call_key: CallKey, run_index: int) -> ScriptEntry:
        entry = self._per_run.get((call_key[0], call_key[1], run_index)) or self._generic.get(call_key)
        if entry is None:
            raise ScriptMiss(call_key)
        return entry

    def has(self, call_key: CallKey) -> bool:
        return call_key in self._generic


class MockBackend:
    """Deterministic backend replaying a :class:`MockScript`."""

    def __init__(self, script: MockScript) -> None:
        self.script = script

    def complete(self, request: ModelRequest, call_key: CallKey, ctx: CallContext) -> ModelResponse:
        entry = self.script.lookup(call_key, ctx.run_index)
        prompt_tokens = count_tokens(request.prompt)
        if entry.total_tokens is not None:
            completion = entry.total_tokens - prompt_tokens
            if completion < 0:
                raise ConfigError(
                    f"script entry {call_key}: prompt already uses {prompt_tokens} tokens,"
                    f" more than total_tokens={entry.total_tokens}"
                )
        elif entry.completion_tokens is not None:
            completion = entry.completion_tokens
        else:
            completion = count_tokens(entry.response_text)
        latency = entry.simulated_latency
        if entry.jitter_seed is not None and entry.jitter_seconds > 0:
            rng = random.Random(f"{entry.jitter_seed}:{ctx.seed}:{ctx.run_index}:{call_key[0]}:{call_key[1]}")
            latency = max(0.0, latency + rng.uniform(-entry.jitter_seconds, entry.jitter_seconds))
        ctx.clock.sleep(latency)
        return ModelResponse(entry.response_text, prompt_tokens, completion, latency)


# --------------------------------------------------------------------------
# HTTP


@dataclass(frozen=True)
class HttpConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout_seconds: float = 60.0
    models: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "HttpConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        allowed = {"base_url", "model", "api_key_env", "timeout_seconds", "models"}
        if not isinstance(doc, dict) or set(doc) - allowed or "base_url" not in doc or "model" not in doc:
            raise ConfigError(f"{path}: expected keys base_url, model and optionally {sorted(allowed)}")
        return cls(**doc)


class HttpBackend:
    """Client for an OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(self, config: HttpConfig, transport: httpx.BaseTransport | None = None) -> None:
        self.config = config
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers=headers,
            timeout=config.timeout_seconds,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def complete(self, request: ModelRequest, call_key: CallKey, ctx: CallContext) -> ModelResponse:
        payload: dict[str, Any] = {
            "model": self.config.models.get(request.model_ref, self.config.model),
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            payload["max_tokens"] = request.max_output_tokens
        start = ctx.clock.now()
        try:
            resp = self._client.post("/chat/completions", json=payload)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise TransportError(f"{call_key[0]} attempt {call_key[1]}: {exc}") from exc
        latency = max(ctx.clock.now() - start, 0.0)
        try:
            text = data["choices"][0]["message"].get("content") or ""
        except (KeyError, IndexError, TypeError, AttributeError):
            raise TransportError(f"unexpected response shape: {str(data)[:200]}") from None
        usage = data.get("usage") or {}
        return ModelResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", count_tokens(request.prompt))),
            completion_tokens=int(usage.get("completion_tokens", count_tokens(text))),
            model_latency=latency,
        )
