"""Subtask graphs and their config-document form.

A pipeline is an ordered list of subtasks, data edges between them, the raw
task inputs (``root_inputs``), and optionally a single-prompt rendering of the
whole task for the monolithic strategy.  Everything here is immutable and
pure; the execution engine consumes it.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from . import valuepath
from .errors import CycleError, ParseError, SpecError, UnknownSubtask
from .schema import SchemaNode, schema_from_dict, schema_to_dict

ROOT = "root"
DEFAULT_MAX_REPAIR_ATTEMPTS = 3

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_IDENT = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*\Z")


class Strategy(str, Enum):
    MONOLITHIC = "monolithic"
    STATIC = "static"
    RSTD = "rstd"


@dataclass(frozen=True)
class InputKey:
    key: str
    source: str
    required: bool = True


@dataclass(frozen=True)
class FailurePolicy:
    """Per-subtask recovery configuration.

    ``None`` fields fall back to defaults in :func:`resolve_failure_policy`.
    """

    max_repair_attempts: int | None = None
    rstd_retry_set: tuple[str, ...] | None = None
    static_retry_set: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SubtaskSpec:
    id: str
    name: str
    prompt_template: str
    input_keys: tuple[InputKey, ...]
    output_schema: SchemaNode
    model_ref: str = "default"
    confidence_path: str | None = None
    confidence_threshold: float | None = None
    failure_policy: FailurePolicy | None = None

    def placeholders(self) -> list[str]:
        return placeholders(self.prompt_template)


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    skip_arc: bool = False


@dataclass(frozen=True)
class PipelineSpec:
    id: str
    subtasks: tuple[SubtaskSpec, ...]
    edges: tuple[Edge, ...] = ()
    root_inputs: Mapping[str, str] = field(default_factory=dict)
    monolithic_prompt: str | None = None
    ground_truth: Mapping[str, Any] | None = None

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subtasks]

    def subtask(self, subtask_id: str) -> SubtaskSpec:
        for s in self.subtasks:
            if s.id == subtask_id:
                return s
        raise UnknownSubtask(subtask_id)

    def successors(self, subtask_id: str) -> list[str]:
        return [e.target for e in self.edges if e.source == subtask_id]

    def predecessors(self, subtask_id: str) -> list[str]:
        return [e.source for e in self.edges if e.target == subtask_id and e.source != ROOT]


def placeholders(template: str) -> list[str]:
    return list(dict.fromkeys(_PLACEHOLDER.findall(template)))


def render(template: str, values: Mapping[str, str], missing: str = "null") -> str:
    """Substitute ``{key}`` placeholders; other braces are left untouched."""
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), missing), template)


# --------------------------------------------------------------------------
# graph operations


def topological_order(pipeline: PipelineSpec) -> list[str]:
    """Kahn's algorithm with declaration order as the tie-breaker."""
    ids = pipeline.ids
    index = {sid: i for i, sid in enumerate(ids)}
    indegree = {sid: 0 for sid in ids}
    succ: dict[str, list[str]] = {sid: [] for sid in ids}
    for e in pipeline.edges:
        if e.source == ROOT:
            continue
        succ[e.source].append(e.target)
        indegree[e.target] += 1
    heap = [index[sid] for sid in ids if indegree[sid] == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        sid = ids[heapq.heappop(heap)]
        order.append(sid)
        for nxt in succ[sid]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(heap, index[nxt])
    if len(order) != len(ids):
        raise CycleError(_find_cycle(pipeline, {sid for sid in ids if indegree[sid] > 0}))
    return order


def _find_cycle(pipeline: PipelineSpec, nodes: set[str]) -> list[str]:
    succ = {sid: [t for t in pipeline.successors(sid) if t in nodes] for sid in nodes}
    start = min(nodes, key=pipeline.ids.index)
    # every remaining node has an in-edge from a remaining node, so walking
    # predecessors must revisit a node
    pred = {sid: [s for s in nodes if sid in succ[s]] for sid in nodes}
    seen: list[str] = []
    cur = start
    while cur not in seen:
        seen.append(cur)
        cur = min(pred[cur], key=pipeline.ids.index)
    cycle = seen[seen.index(cur):]
    cycle.reverse()
    return cycle


def downstream_closure(pipeline: PipelineSpec, subtask_id: str) -> set[str]:
    """All subtasks reachable from ``subtask_id``, excluding itself."""
    pipeline.subtask(subtask_id)
    seen: set[str] = set()
    stack = list(pipeline.successors(subtask_id))
    while stack:
        sid = stack.pop()
        if sid in seen:
            continue
        seen.add(sid)
        stack.extend(pipeline.successors(sid))
    seen.discard(subtask_id)
    return seen


def ancestors(pipeline: PipelineSpec, subtask_id: str) -> set[str]:
    pipeline.subtask(subtask_id)
    seen: set[str] = set()
    stack = list(pipeline.predecessors(subtask_id))
    while stack:
        sid = stack.pop()
        if sid in seen:
            continue
        seen.add(sid)
        stack.extend(pipeline.predecessors(sid))
    return seen


def resolve_failure_policy(pipeline: PipelineSpec, subtask_id: str) -> FailurePolicy:
    configured = pipeline.subtask(subtask_id).failure_policy or FailurePolicy()
    order = topological_order(pipeline)
    default_static = {subtask_id} | downstream_closure(pipeline, subtask_id)
    return FailurePolicy(
        max_repair_attempts=(
            configured.max_repair_attempts
            if configured.max_repair_attempts is not None
            else DEFAULT_MAX_REPAIR_ATTEMPTS
        ),
        rstd_retry_set=in_order(order, configured.rstd_retry_set or (subtask_id,)),
        static_retry_set=in_order(order, configured.static_retry_set or default_static),
    )


def in_order(order: list[str], ids: Iterable[str]) -> tuple[str, ...]:
    wanted = set(ids)
    return tuple(sid for sid in order if sid in wanted)


def skip_targets(pipeline: PipelineSpec, subtask_id: str) -> tuple[str, ...]:
    """Subtasks bypassed by a skip arc leaving ``subtask_id``.

    For a skip arc X -> Z these are the direct successors of X, other than Z,
    from which Z is reachable.
    """
    arcs = [e.target for e in pipeline.edges if e.source == subtask_id and e.skip_arc]
    if not arcs:
        return ()
    out = []
    for nxt in pipeline.successors(subtask_id):
        if nxt in arcs:
            continue
        reach = downstream_closure(pipeline, nxt)
        if any(z in reach for z in arcs):
            out.append(nxt)
    return in_order(topological_order(pipeline), out)


# --------------------------------------------------------------------------
# invariants


def check_pipeline(pipeline: PipelineSpec) -> PipelineSpec:
    """Raise ``SpecError``/``CycleError`` unless every invariant holds."""
    if not pipeline.subtasks:
        raise SpecError("subtasks", "pipeline needs at least one subtask")
    if not _IDENT.match(pipeline.id):
        raise SpecError("id", f"bad identifier {pipeline.id!r}")
    ids = pipeline.ids
    for i, sub in enumerate(pipeline.subtasks):
        where = f"subtasks[{i}]"
        if not _IDENT.match(sub.id) or sub.id in (ROOT, "monolithic"):
            raise SpecError(f"{where}.id", f"bad or reserved subtask id {sub.id!r}")
        if ids.index(sub.id) != i:
            raise SpecError(f"{where}.id", f"duplicate subtask id {sub.id!r}")
    known = set(ids)
    for i, e in enumerate(pipeline.edges):
        where = f"edges[{i}]"
        if e.source != ROOT and e.source not in known:
            raise SpecError(f"{where}.from", f"unknown subtask {e.source!r}")
        if e.target not in known:
            raise SpecError(f"{where}.to", f"unknown subtask {e.target!r}")
        if e.source == e.target:
            raise SpecError(where, "self-loop")
    topological_order(pipeline)

    for i, sub in enumerate(pipeline.subtasks):
        where = f"subtasks[{i}]"
        declared = [k.key for k in sub.input_keys]
        if len(set(declared)) != len(declared):
            raise SpecError(f"{where}.input_keys", "duplicate input key")
        for name in sub.placeholders():
            if name not in declared:
                raise SpecError(f"{where}.prompt_template", f"placeholder {{{name}}} has no input key")
        upstream = ancestors(pipeline, sub.id)
        for j, k in enumerate(sub.input_keys):
            kwhere = f"{where}.input_keys[{j}]"
            if k.source == ROOT:
                if k.key not in pipeline.root_inputs:
                    raise SpecError(kwhere, f"root input {k.key!r} not in root_inputs")
            elif k.source not in known:
                raise SpecError(f"{kwhere}.source", f"unknown subtask {k.source!r}")
            elif k.source not in upstream:
                raise SpecError(f"{kwhere}.source", f"{k.source!r} is not upstream of {sub.id!r}")
        if (sub.confidence_path is None) != (sub.confidence_threshold is None):
            raise SpecError(where, "confidence_path and confidence_threshold go together")
        if sub.confidence_path is not None:
            try:
                valuepath.parse_path(sub.confidence_path)
            except ValueError as exc:
                raise SpecError(f"{where}.confidence_path", str(exc)) from None
            if not 0.0 <= sub.confidence_threshold <= 1.0:  # type: ignore[operator]
                raise SpecError(f"{where}.confidence_threshold", "must lie in [0, 1]")
        pol = sub.failure_policy
        if pol is not None:
            pwhere = f"{where}.failure_policy"
            if pol.max_repair_attempts is not None and pol.max_repair_attempts < 1:
                raise SpecError(f"{pwhere}.max_repair_attempts", "must be >= 1")
            eligible = upstream | {sub.id}
            for name in ("rstd_retry_set", "static_retry_set"):
                rs = getattr(pol, name)
                if rs is None:
                    continue
                if not rs:
                    raise SpecError(f"{pwhere}.{name}", "must not be empty")
                unknown = [r for r in rs if r not in known]
                if unknown:
                    raise SpecError(f"{pwhere}.{name}", f"unknown subtasks {unknown}")
                if not eligible & set(rs):
                    raise SpecError(f"{pwhere}.{name}", f"must contain {sub.id!r} or one of its ancestors")
    gt = pipeline.ground_truth
    if gt is not None:
        if set(gt) - {"path", "equals", "contains"} or "path" not in gt:
            raise SpecError("ground_truth", "expects 'path' plus 'equals' or 'contains'")
        if ("equals" in gt) == ("contains" in gt):
            raise SpecError("ground_truth", "give exactly one of 'equals' / 'contains'")
    return pipeline


def check_ground_truth(pipeline: PipelineSpec, outputs: Mapping[str, Any]) -> bool:
    """Compare final outputs (keyed by subtask id) against the embedded ground truth.

    Pipelines without ground truth count as correct whenever they complete.
    """
    gt = pipeline.ground_truth
    if gt is None:
        return True
    found = valuepath.get(dict(outputs), gt["path"], None)
    if "equals" in gt:
        return found == gt["equals"]
    if not isinstance(found, str):
        return False
    needles = gt["contains"] if isinstance(gt["contains"], list) else [gt["contains"]]
    return all(str(n).lower() in found.lower() for n in needles)


# --------------------------------------------------------------------------
# document form

_TOP_FIELDS = {"id", "root_inputs", "subtasks", "edges", "monolithic_prompt", "ground_truth"}
_SUBTASK_FIELDS = {
    "id",
    "name",
    "prompt_template",
    "input_keys",
    "output_schema",
    "confidence_path",
    "confidence_threshold",
    "model_ref",
    "failure_policy",
}
_POLICY_FIELDS = {"max_repair_attempts", "rstd_retry_set", "static_retry_set"}


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise SpecError(path, message)


def _str_list(value: Any, path: str) -> tuple[str, ...]:
    _expect(isinstance(value, list) and all(isinstance(v, str) for v in value), path, "must be a list of ids")
    return tuple(value)


def _reject_unknown(doc: Mapping[str, Any], allowed: set[str], path: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise SpecError(where, f"unknown field {extra[0]!r}")


def pipeline_from_dict(doc: Any) -> PipelineSpec:
    _expect(isinstance(doc, dict), "$", "pipeline document must be an object")
    _reject_unknown(doc, _TOP_FIELDS, "")
    for key in ("id", "subtasks"):
        _expect(key in doc, key, "missing")
    _expect(isinstance(doc["id"], str), "id", "must be a string")
    root_inputs = doc.get("root_inputs", {})
    _expect(
        isinstance(root_inputs, dict) and all(isinstance(v, str) for v in root_inputs.values()),
        "root_inputs",
        "must map names to strings",
    )
    _expect(isinstance(doc["subtasks"], list), "subtasks", "must be a list")
    subtasks = tuple(_subtask_from_dict(s, f"subtasks[{i}]") for i, s in enumerate(doc["subtasks"]))
    edges_doc = doc.get("edges", [])
    _expect(isinstance(edges_doc, list), "edges", "must be a list")
    edges = []
    for i, e in enumerate(edges_doc):
        where = f"edges[{i}]"
        _expect(isinstance(e, dict), where, "must be an object")
        _reject_unknown(e, {"from", "to", "skip_arc"}, where)
        _expect(isinstance(e.get("from"), str), f"{where}.from", "must be a string")
        _expect(isinstance(e.get("to"), str), f"{where}.to", "must be a string")
        _expect(isinstance(e.get("skip_arc", False), bool), f"{where}.skip_arc", "must be a boolean")
        edges.append(Edge(e["from"], e["to"], e.get("skip_arc", False)))
    mono = doc.get("monolithic_prompt")
    _expect(mono is None or isinstance(mono, str), "monolithic_prompt", "must be a string")
    gt = doc.get("ground_truth")
    _expect(gt is None or isinstance(gt, dict), "ground_truth", "must be an object")
    return check_pipeline(
        PipelineSpec(
            id=doc["id"],
            subtasks=subtasks,
            edges=tuple(edges),
            root_inputs=dict(root_inputs),
            monolithic_prompt=mono,
            ground_truth=gt,
        )
    )


def _subtask_from_dict(doc: Any, where: str) -> SubtaskSpec:
    _expect(isinstance(doc, dict), where, "must be an object")
    _reject_unknown(doc, _SUBTASK_FIELDS, where)
    for key in ("id", "prompt_template", "input_keys", "output_schema"):
        _expect(key in doc, f"{where}.{key}", "missing")
    for key in ("id", "name", "prompt_template", "model_ref"):
        if key in doc:
            _expect(isinstance(doc[key], str), f"{where}.{key}", "must be a string")
    _expect(isinstance(doc["input_keys"], list), f"{where}.input_keys", "must be a list")
    keys = []
    for j, k in enumerate(doc["input_keys"]):
        kwhere = f"{where}.input_keys[{j}]"
        _expect(isinstance(k, dict), kwhere, "must be an object")
        _reject_unknown(k, {"key", "source", "required"}, kwhere)
        _expect(isinstance(k.get("key"), str), f"{kwhere}.key", "must be a string")
        _expect(isinstance(k.get("source"), str), f"{kwhere}.source", "must be a string")
        _expect(isinstance(k.get("required", True), bool), f"{kwhere}.required", "must be a boolean")
        keys.append(InputKey(k["key"], k["source"], k.get("required", True)))
    policy = None
    if "failure_policy" in doc:
        pdoc = doc["failure_policy"]
        pwhere = f"{where}.failure_policy"
        _expect(isinstance(pdoc, dict), pwhere, "must be an object")
        _reject_unknown(pdoc, _POLICY_FIELDS, pwhere)
        mra = pdoc.get("max_repair_attempts")
        _expect(
            mra is None or (isinstance(mra, int) and not isinstance(mra, bool)),
            f"{pwhere}.max_repair_attempts",
            "must be an integer",
        )
        policy = FailurePolicy(
            max_repair_attempts=mra,
            rstd_retry_set=_str_list(pdoc["rstd_retry_set"], f"{pwhere}.rstd_retry_set")
            if "rstd_retry_set" in pdoc
            else None,
            static_retry_set=_str_list(pdoc["static_retry_set"], f"{pwhere}.static_retry_set")
            if "static_retry_set" in pdoc
            else None,
        )
    threshold = doc.get("confidence_threshold")
    _expect(
        threshold is None or (isinstance(threshold, (int, float)) and not isinstance(threshold, bool)),
        f"{where}.confidence_threshold",
        "must be a number",
    )
    cpath = doc.get("confidence_path")
    _expect(cpath is None or isinstance(cpath, str), f"{where}.confidence_path", "must be a string")
    return SubtaskSpec(
        id=doc["id"],
        name=doc.get("name", doc["id"]),
        prompt_template=doc["prompt_template"],
        input_keys=tuple(keys),
        output_schema=schema_from_dict(doc["output_schema"], f"{where}.output_schema"),
        model_ref=doc.get("model_ref", "default"),
        confidence_path=cpath,
        confidence_threshold=threshold,
        failure_policy=policy,
    )


def parse_pipeline(document: str) -> PipelineSpec:
    """Parse a pipeline-config document (JSON text)."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed pipeline document: {exc}") from None
    return pipeline_from_dict(doc)


def pipeline_to_dict(pipeline: PipelineSpec) -> dict[str, Any]:
    subtasks = []
    for s in pipeline.subtasks:
        d: dict[str, Any] = {
            "id": s.id,
            "name": s.name,
            "prompt_template": s.prompt_template,
            "input_keys": [{"key": k.key, "source": k.source, "required": k.required} for k in s.input_keys],
            "output_schema": schema_to_dict(s.output_schema),
            "model_ref": s.model_ref,
        }
        if s.confidence_path is not None:
            d["confidence_path"] = s.confidence_path
            d["confidence_threshold"] = s.confidence_threshold
        if s.failure_policy is not None:
            p = s.failure_policy
            pd: dict[str, Any] = {}
            if p.max_repair_attempts is not None:
                pd["max_repair_attempts"] = p.max_repair_attempts
            if p.rstd_retry_set is not None:
                pd["rstd_retry_set"] = list(p.rstd_retry_set)
            if p.static_retry_set is not None:
                pd["static_retry_set"] = list(p.static_retry_set)
            d["failure_policy"] = pd
        subtasks.append(d)
    out: dict[str, Any] = {
        "id": pipeline.id,
        "root_inputs": dict(pipeline.root_inputs),
        "subtasks": subtasks,
        "edges": [{"from": e.source, "to": e.target, "skip_arc": e.skip_arc} for e in pipeline.edges],
    }
    if pipeline.monolithic_prompt is not None:
        out["monolithic_prompt"] = pipeline.monolithic_prompt
    if pipeline.ground_truth is not None:
        out["ground_truth"] = dict(pipeline.ground_truth)
    return out


def serialize_pipeline(pipeline: PipelineSpec) -> str:
    return json.dumps(pipeline_to_dict(pipeline), indent=2, ensure_ascii=False)
