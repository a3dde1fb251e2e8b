"""Value paths of the form ``$``, ``$.name``, ``$[0].name``, ``$["odd key"]``."""

from __future__ import annotations

import json
import re
from typing import Any, Union

Step = Union[str, int]

_TOKEN = re.compile(
    r"""\.(?P<name>[A-Za-z_][A-Za-z0-9_\-]*)"""
    r"""|\[(?P<index>\d+)\]"""
    r"""|\[(?P<quoted>"(?:[^"\\]|\\.)*")\]"""
)
_PLAIN_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*\Z")


def parse_path(path: str) -> tuple[Step, ...]:
    if not path.startswith("$"):
        raise ValueError(f"value path must start with '$': {path!r}")
    steps: list[Step] = []
    pos = 1
    while pos < len(path):
        m = _TOKEN.match(path, pos)
        if m is None:
            raise ValueError(f"bad value path {path!r} at offset {pos}")
        if m.group("name") is not None:
            steps.append(m.group("name"))
        elif m.group("index") is not None:
            steps.append(int(m.group("index")))
        else:
            steps.append(json.loads(m.group("quoted")))
        pos = m.end()
    return tuple(steps)


def format_path(steps: tuple[Step, ...] | list[Step]) -> str:
    out = ["$"]
    for step in steps:
        if isinstance(step, int):
            out.append(f"[{step}]")
        elif _PLAIN_NAME.match(step):
            out.append(f".{step}")
        else:
            out.append(f"[{json.dumps(step)}]")
    return "".join(out)


def child(path: str, step: Step) -> str:
    return path + format_path((step,))[1:]


_MISSING = object()


def get(value: Any, path: str, default: Any = _MISSING) -> Any:
    """Return the value at ``path``; raise ``KeyError`` when absent and no default."""
    cur = value
    for step in parse_path(path):
        if isinstance(step, int) and isinstance(cur, list) and step < len(cur):
            cur = cur[step]
        elif isinstance(step, str) and isinstance(cur, dict) and step in cur:
            cur = cur[step]
        else:
            if default is _MISSING:
                raise KeyError(path)
            return default
    return cur


def delete(value: Any, path: str) -> Any:
    """Return ``value`` with the element at ``path`` removed.

    The input is not mutated; only the containers along the path are copied.
    """
    steps = parse_path(path)
    if not steps:
        raise KeyError(path)
    get(value, format_path(steps))  # existence check

    def rebuild(node: Any, rest: tuple[Step, ...]) -> Any:
        head = rest[0]
        if len(rest) == 1:
            if isinstance(node, dict):
                return {k: v for k, v in node.items() if k != head}
            return [v for i, v in enumerate(node) if i != head]
        if isinstance(node, dict):
            return {k: (rebuild(v, rest[1:]) if k == head else v) for k, v in node.items()}
        return [rebuild(v, rest[1:]) if i == head else v for i, v in enumerate(node)]

    return rebuild(value, steps)
