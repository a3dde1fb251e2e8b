from __future__ import annotations

from typing import Any

import pytest

from taskdecomp.backends import MockBackend, MockScript
from taskdecomp.bench import load_backend, load_pipeline
from taskdecomp.pipeline import PipelineSpec, pipeline_from_dict

UC2_INJECTION = "target=S3 attempt=1 mode=drop_field path=$.anomalies[0].confidence"
UC1_INJECTION = "target=A3 attempt=1 mode=drop_field path=$.fix.fixes[0].patch"

OBJ_OK = {"kind": "object", "properties": {"ok": {"kind": "boolean"}}, "required": ["ok"]}


@pytest.fixture(scope="session")
def uc1() -> PipelineSpec:
    return load_pipeline("uc1")


@pytest.fixture(scope="session")
def uc2() -> PipelineSpec:
    return load_pipeline("uc2")


@pytest.fixture(scope="session")
def uc1_backend():
    return load_backend("mock:uc1-script")


@pytest.fixture(scope="session")
def uc2_backend():
    return load_backend("mock:uc2-script")


def dag_pipeline(n: int, edges: list[tuple[int, int]], *, pid: str = "g", policy: dict | None = None) -> PipelineSpec:
    """Pipeline over nodes N0..N{n-1}; every node reads every direct predecessor.

    Sources read the single root input ``doc``.
    """
    subtasks = []
    for i in range(n):
        preds = sorted({a for a, b in edges if b == i})
        keys = [{"key": f"in{a}", "source": f"N{a}", "required": True} for a in preds]
        if not keys:
            keys = [{"key": "doc", "source": "root", "required": True}]
        template = f"task N{i}: " + " ".join("{" + k["key"] + "}" for k in keys)
        sub: dict[str, Any] = {"id": f"N{i}", "name": f"node {i}", "prompt_template": template,
                               "input_keys": keys, "output_schema": OBJ_OK}
        if policy and i in policy:
            sub["failure_policy"] = policy[i]
        subtasks.append(sub)
    return pipeline_from_dict({
        "id": pid,
        "root_inputs": {"doc": "input document"},
        "subtasks": subtasks,
        "edges": [{"from": f"N{a}", "to": f"N{b}", "skip_arc": False} for a, b in edges],
    })


def script_backend(entries: list[dict]) -> MockBackend:
    return MockBackend(MockScript.from_dict({"entries": entries}))
