"""Output contracts for model calls.

A deliberately small schema language (object / array / string / number /
boolean / enum) covering required-field and list-shape checks, plus the
pieces of the repair loop that depend on it: lenient JSON extraction from
raw model text, structured violation reports, and repair-prompt rendering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping

from . import valuepath
from .errors import NoParsableValue, PreconditionViolated, SpecError

JsonValue = Any  # None | bool | int | float | str | list[JsonValue] | dict[str, JsonValue]


class Kind(str, Enum):
    OBJECT = "object"
    ARRAY = "array"
    STRING = "string"
    NUMBER = "number"
    BOOLEAN = "boolean"
    ENUM = "enum"


@dataclass(frozen=True)
class SchemaNode:
    kind: Kind
    properties: tuple[tuple[str, "SchemaNode"], ...] = ()
    required: tuple[str, ...] = ()
    items: "SchemaNode | None" = None
    min_items: int | None = None
    minimum: float | None = None
    maximum: float | None = None
    values: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        names = [name for name, _ in self.properties]
        if len(set(names)) != len(names):
            raise SpecError("$", "duplicate property names")
        missing = [r for r in self.required if r not in names]
        if missing:
            raise SpecError("$", f"required names not declared as properties: {missing}")
        if self.kind is Kind.ARRAY and self.items is None:
            raise SpecError("$", "array schema needs 'items'")
        if self.min_items is not None and self.min_items < 0:
            raise SpecError("$", "min_items must be >= 0")
        if self.minimum is not None and self.maximum is not None and self.minimum > self.maximum:
            raise SpecError("$", "minimum > maximum")
        if self.kind is Kind.ENUM and not self.values:
            raise SpecError("$", "enum needs at least one value")

    def property_map(self) -> dict[str, "SchemaNode"]:
        return dict(self.properties)


_ALLOWED_FIELDS: dict[Kind, set[str]] = {
    Kind.OBJECT: {"kind", "properties", "required"},
    Kind.ARRAY: {"kind", "items", "min_items"},
    Kind.STRING: {"kind"},
    Kind.NUMBER: {"kind", "minimum", "maximum"},
    Kind.BOOLEAN: {"kind"},
    Kind.ENUM: {"kind", "values"},
}


def schema_from_dict(doc: Any, path: str = "$") -> SchemaNode:
    """Build a ``SchemaNode`` from its config-document form; unknown fields are rejected."""
    if not isinstance(doc, dict):
        raise SpecError(path, "schema node must be an object")
    try:
        kind = Kind(doc.get("kind"))
    except ValueError:
        raise SpecError(f"{path}.kind", f"unknown schema kind {doc.get('kind')!r}") from None
    extra = set(doc) - _ALLOWED_FIELDS[kind]
    if extra:
        raise SpecError(path, f"unknown fields for {kind.value} schema: {sorted(extra)}")
    try:
        if kind is Kind.OBJECT:
            props = doc.get("properties", {})
            if not isinstance(props, dict):
                raise SpecError(f"{path}.properties", "must be an object")
            required = doc.get("required", [])
            if not isinstance(required, list) or not all(isinstance(r, str) for r in required):
                raise SpecError(f"{path}.required", "must be a list of names")
            return SchemaNode(
                kind,
                properties=tuple(
                    (name, schema_from_dict(sub, f"{path}.properties.{name}"))
                    for name, sub in props.items()
                ),
                required=tuple(required),
            )
        if kind is Kind.ARRAY:
            if "items" not in doc:
                raise SpecError(path, "array schema needs 'items'")
            min_items = doc.get("min_items")
            if min_items is not None and (isinstance(min_items, bool) or not isinstance(min_items, int)):
                raise SpecError(f"{path}.min_items", "must be an integer")
            return SchemaNode(kind, items=schema_from_dict(doc["items"], f"{path}.items"), min_items=min_items)
        if kind is Kind.NUMBER:
            bounds = {}
            for key in ("minimum", "maximum"):
                if key in doc:
                    if not _is_number(doc[key]):
                        raise SpecError(f"{path}.{key}", "must be a number")
                    bounds[key] = doc[key]
            return SchemaNode(kind, **bounds)
        if kind is Kind.ENUM:
            values = doc.get("values")
            if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
                raise SpecError(f"{path}.values", "must be a list of strings")
            return SchemaNode(kind, values=tuple(values))
        return SchemaNode(kind)
    except SpecError as exc:
        if exc.path == "$" and path != "$":
            raise SpecError(path, exc.message) from None
        raise


def schema_to_dict(node: SchemaNode) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": node.kind.value}
    if node.kind is Kind.OBJECT:
        out["properties"] = {name: schema_to_dict(sub) for name, sub in node.properties}
        out["required"] = list(node.required)
    elif node.kind is Kind.ARRAY:
        assert node.items is not None
        out["items"] = schema_to_dict(node.items)
        if node.min_items is not None:
            out["min_items"] = node.min_items
    elif node.kind is Kind.NUMBER:
        if node.minimum is not None:
            out["minimum"] = node.minimum
        if node.maximum is not None:
            out["maximum"] = node.maximum
    elif node.kind is Kind.ENUM:
        out["values"] = list(node.values)
    return out


# --------------------------------------------------------------------------
# values


def serialize(value: JsonValue) -> str:
    """Compact, deterministic JSON text (key order preserved)."""
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def _unique_pairs(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, val in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = val
    return out


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name}")


def _finite_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"number out of range: {text}")
    return value


_DECODER = json.JSONDecoder(
    object_pairs_hook=_unique_pairs, parse_constant=_reject_constant, parse_float=_finite_float
)


def parse_value(text: str) -> JsonValue:
    """Extract the first well-formed JSON value from raw model text.

    A bare JSON document (including scalars) is accepted as-is. Otherwise the
    first object or array that decodes cleanly is returned, so prose around
    the value is tolerated.
    """
    stripped = text.strip()
    try:
        return _DECODER.decode(stripped)
    except ValueError:
        pass
    for pos, ch in enumerate(text):
        if ch not in "[{":
            continue
        try:
            value, _ = _DECODER.raw_decode(text, pos)
        except ValueError:
            continue
        return value
    raise NoParsableValue("no JSON value found in model output")


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    path: str
    expected: str
    found: str

    def to_dict(self) -> dict[str, str]:
        return {"path": self.path, "expected": self.expected, "found": self.found}


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "errors": [e.to_dict() for e in self.errors]}

    def __add__(self, other: "ValidationReport") -> "ValidationReport":
        return ValidationReport(self.errors + other.errors)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def type_name(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    if isinstance(value, dict):
        return "object"
    return type(value).__name__


def _describe(value: Any) -> str:
    if isinstance(value, (dict, list)):
        return type_name(value)
    return f"{type_name(value)} {serialize(value)}"


def _check(value: Any, node: SchemaNode, path: str, out: list[Violation]) -> None:
    kind = node.kind
    if kind is Kind.OBJECT:
        if not isinstance(value, dict):
            out.append(Violation(path, "object", _describe(value)))
            return
        required = set(node.required)
        for name, sub in node.properties:
            sub_path = valuepath.child(path, name)
            if name in value:
                _check(value[name], sub, sub_path, out)
            elif name in required:
                out.append(Violation(sub_path, f"required {sub.kind.value}", "absent"))
    elif kind is Kind.ARRAY:
        if not isinstance(value, list):
            out.append(Violation(path, "array", _describe(value)))
            return
        if node.min_items is not None and len(value) < node.min_items:
            out.append(Violation(path, f"at least {node.min_items} items", f"{len(value)} items"))
        assert node.items is not None
        for i, item in enumerate(value):
            _check(item, node.items, valuepath.child(path, i), out)
    elif kind is Kind.STRING:
        if not isinstance(value, str):
            out.append(Violation(path, "string", _describe(value)))
    elif kind is Kind.BOOLEAN:
        if not isinstance(value, bool):
            out.append(Violation(path, "boolean", _describe(value)))
    elif kind is Kind.NUMBER:
        if not _is_number(value):
            out.append(Violation(path, "number", _describe(value)))
            return
        if node.minimum is not None and value < node.minimum:
            out.append(Violation(path, f"number >= {node.minimum}", _describe(value)))
        if node.maximum is not None and value > node.maximum:
            out.append(Violation(path, f"number <= {node.maximum}", _describe(value)))
    elif kind is Kind.ENUM:
        if not isinstance(value, str) or value not in node.values:
            out.append(Violation(path, "one of " + serialize(list(node.values)), _describe(value)))


def validate(value: JsonValue, schema: SchemaNode, root: str = "$") -> ValidationReport:
    """Check ``value`` against ``schema``; violations come back depth-first in declaration order."""
    errors: list[Violation] = []
    _check(value, schema, root, errors)
    return ValidationReport(tuple(errors))


def unparsable_report() -> ValidationReport:
    return ValidationReport((Violation("$", "a JSON value", "no parsable JSON"),))


# --------------------------------------------------------------------------
# repair + content signal

REPAIR_DELIMITER = "\n\n### VALIDATION FAILED ###\n"


def build_repair_prompt(original_prompt: str, raw_output: str, report: ValidationReport) -> str:
    if report.passed:
        raise PreconditionViolated("repair prompt requested for a passing report")
    lines = [f"- {e.path}: expected {e.expected}, found {e.found}" for e in report.errors]
    return (
        original_prompt
        + REPAIR_DELIMITER
        + "Errors:\n"
        + "\n".join(lines)
        + "\nPrevious output:\n"
        + raw_output
        + "\nReturn the corrected JSON only. Fix only the violations listed above"
        " and keep every other field unchanged."
    )


def check_content_signal(
    value: JsonValue, confidence_path: str | None = None, threshold: float | None = None
) -> bool:
    """True when the output is worth building on.

    Without a path, any non-empty collection or string, and any number or
    boolean, counts. With a path, the value there must be a number at or above
    ``threshold``.
    """
    if confidence_path is None:
        if isinstance(value, (list, dict, str)):
            return len(value) > 0
        return isinstance(value, (bool, int, float))
    if threshold is None:
        raise PreconditionViolated("confidence_path given without threshold")
    found = valuepath.get(value, confidence_path, None)
    return _is_number(found) and found >= threshold


def coerce_schema(doc: SchemaNode | Mapping[str, Any]) -> SchemaNode:
    return doc if isinstance(doc, SchemaNode) else schema_from_dict(dict(doc))


__all__ = [
    "JsonValue",
    "Kind",
    "SchemaNode",
    "ValidationReport",
    "Violation",
    "build_repair_prompt",
    "check_content_signal",
    "parse_value",
    "schema_from_dict",
    "schema_to_dict",
    "serialize",
    "validate",
]
