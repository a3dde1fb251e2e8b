import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import UC1_INJECTION, UC2_INJECTION, dag_pipeline, script_backend
from taskdecomp.backends import MockBackend, MockScript
from taskdecomp.bench import BUNDLED_SCRIPTS, asset_text, load_backend
from taskdecomp.engine import (
    DecisionKind,
    RunConfig,
    compile_monolithic,
    compute_retry_set,
    evaluate_branch_signals,
    run,
)
from taskdecomp.errors import HardFailure, TransportError, UnknownSubtask
from taskdecomp.faults import parse_injection
from taskdecomp.metrics import measure_framework_overhead, strip_timing
from taskdecomp.pipeline import Strategy, pipeline_from_dict, pipeline_to_dict, topological_order
from taskdecomp.state import StateEntry, SubtaskStatus

FROZEN = {"clock": "frozen"}


def script_doc(name):
    return json.loads(asset_text(BUNDLED_SCRIPTS[name]))


def with_entries(name, *extra, replace=()):
    """A bundled script with some generic entries swapped out and run-specific entries added."""
    doc = script_doc(name)
    for sub, att, response in replace:
        for e in doc["entries"]:
            if e["subtask"] == sub and e["attempt"] == att and "run" not in e:
                e["response"] = response
    doc["entries"].extend(extra)
    return MockBackend(MockScript.from_dict(doc))


def calls(report):
    return [(c.subtask, c.attempt, c.retry_flag) for c in report.calls]


# -- compile_monolithic --------------------------------------------------------

def test_explicit_monolithic_prompt_verbatim(uc2):
    assert compile_monolithic(uc2) == uc2.monolithic_prompt


def test_single_subtask_prompt_is_rendered_template():
    p = dag_pipeline(1, [])
    assert compile_monolithic(p) == "task N0: input document"


def test_compiled_prompt_depends_on_order():
    a = dag_pipeline(2, [])
    doc = pipeline_to_dict(a)
    doc["subtasks"].reverse()
    b = pipeline_from_dict(doc)
    assert compile_monolithic(a) != compile_monolithic(b)
    assert compile_monolithic(a) == compile_monolithic(a)


# -- branch signals / retry sets ---------------------------------------------------

def test_branch_signals(uc2):
    done = lambda v: StateEntry(status=SubtaskStatus.COMPLETED, value=v, attempts=1)
    d = evaluate_branch_signals(done([]), uc2.subtask("S1"), uc2)
    assert (d.kind, d.targets) == (DecisionKind.SKIP, ("S2",))
    assert evaluate_branch_signals(done([{"confidence": 0.9}]), uc2.subtask("S2"), uc2).kind is DecisionKind.PROCEED
    low = evaluate_branch_signals(done([{"confidence": 0.1}]), uc2.subtask("S2"), uc2)
    assert (low.kind, low.low_content) == (DecisionKind.PROCEED, True)
    failed = StateEntry(status=SubtaskStatus.FAILED, attempts=3)
    assert evaluate_branch_signals(failed, uc2.subtask("S3"), uc2).kind is DecisionKind.FAIL


def test_compute_retry_set_examples(uc1, uc2):
    assert compute_retry_set(uc2, Strategy.STATIC, "S3") == ["S3", "S4", "S5"]
    assert compute_retry_set(uc2, Strategy.RSTD, "S3") == ["S3"]
    assert compute_retry_set(uc2, Strategy.MONOLITHIC, "S3") == topological_order(uc2)
    assert compute_retry_set(uc1, Strategy.STATIC, "A3") == ["A2", "A3"]
    assert compute_retry_set(uc1, Strategy.RSTD, "A3") == ["A2"]
    with pytest.raises(UnknownSubtask):
        compute_retry_set(uc2, Strategy.RSTD, "S0")


# -- repair loop ----------------------------------------------------------------------

def test_natural_failure_repaired_on_second_attempt(uc2):
    backend = load_backend("mock:uc2-natural")
    report = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), backend, run_index=7)
    s2 = [c for c in report.calls if c.subtask == "S2"]
    assert [(c.attempt, c.validation_passed, c.retry_flag) for c in s2] == [(1, False, False), (2, True, True)]
    assert "$[0].confidence" in s2[1].prompt
    assert s2[0].response_text in s2[1].prompt
    assert next(e for e in report.state if e["subtask_id"] == "S2")["attempts"] == 2
    assert report.correct


def test_clean_subtask_single_record(uc2, uc2_backend):
    report = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), uc2_backend)
    assert calls(report) == [(s, 1, False) for s in ("S1", "S2", "S3", "S4", "S5")]
    assert all(c.validation_passed for c in report.calls)


def test_repair_exhaustion_is_hard_failure(uc2):
    bad = {"root_cause": "x"}  # no evidence / confidence
    backend = with_entries("uc2-script", {"subtask": "S3", "attempt": 3, "response": bad},
                           replace=[("S3", 1, bad), ("S3", 2, bad)])
    with pytest.raises(HardFailure) as err:
        run(uc2, RunConfig(Strategy.RSTD, **FROZEN), backend)
    report = err.value.report
    assert [c.subtask for c in report.calls] == ["S1", "S2", "S3", "S3", "S3"]
    assert report.outcome.value == "hard_failure"
    assert next(e for e in report.state if e["subtask_id"] == "S3")["status"] == "failed"


# -- skip arc ---------------------------------------------------------------------------

def test_empty_triage_takes_skip_arc(uc2):
    backend = with_entries("uc2-script", replace=[("S1", 1, [])])
    report = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), backend)
    assert [c.subtask for c in report.calls] == ["S1", "S3", "S4", "S5"]
    s3 = next(c for c in report.calls if c.subtask == "S3")
    assert "Anomalies:\nnull" in s3.prompt
    assert {e["subtask_id"]: e["status"] for e in report.state}["S2"] == "skipped"


# -- strategies under injection ------------------------------------------------------------

@pytest.mark.parametrize("injection", [UC2_INJECTION, "target=S3 attempt=1 mode=corrupt_response path=$.confidence"])
def test_uc2_injected_runs(uc2, uc2_backend, injection):
    inj = parse_injection(injection)
    got = {s: run(uc2, RunConfig(s, injection=inj, **FROZEN), uc2_backend) for s in Strategy}
    assert (got[Strategy.RSTD].call_count, got[Strategy.RSTD].retry_tokens) == (6, 436)
    assert calls(got[Strategy.RSTD])[2:4] == [("S3", 1, False), ("S3", 2, True)]
    assert (got[Strategy.STATIC].call_count, got[Strategy.STATIC].retry_tokens) == (8, 1416)
    assert calls(got[Strategy.STATIC])[5:] == [("S3", 2, True), ("S4", 2, True), ("S5", 2, True)]
    assert (got[Strategy.MONOLITHIC].call_count, got[Strategy.MONOLITHIC].retry_tokens) == (2, 904)
    assert all(r.correct for r in got.values())
    for r in got.values():
        assert sum(c.injection_applied for c in r.calls) == 1


def test_uc1_rstd_retries_fix_generation(uc1, uc1_backend):
    report = run(uc1, RunConfig(Strategy.RSTD, injection=parse_injection(UC1_INJECTION), **FROZEN), uc1_backend)
    assert calls(report) == [("A1", 1, False), ("A2", 1, False), ("A3", 1, False),
                             ("A2", 2, True), ("A3", 2, False), ("A4", 1, False)]
    a2_retry = report.calls[3]
    assert "$.fix.fixes[0].patch" in a2_retry.prompt
    assert report.retry_tokens == 460


def test_static_forwards_unvalidated_then_retries(uc2):
    backend = load_backend("mock:uc2-natural")
    report = run(uc2, RunConfig(Strategy.STATIC, **FROZEN), backend, run_index=9)
    assert [c.validation_passed for c in report.calls[:5]] == [True, False, False, True, True]
    # failed S2 output reached S3 unvalidated (static has no gate)
    assert report.calls[1].response_text in report.calls[2].prompt
    assert calls(report)[5:] == [("S2", 2, True), ("S3", 2, True), ("S4", 2, True), ("S5", 2, True)]


def test_monolithic_second_failure_is_hard(uc2):
    backend = with_entries("uc2-script", replace=[("monolithic", 1, {"S1": []}), ("monolithic", 2, {"S1": []})])
    with pytest.raises(HardFailure) as err:
        run(uc2, RunConfig(Strategy.MONOLITHIC, **FROZEN), backend)
    assert calls(err.value.report) == [("monolithic", 1, False), ("monolithic", 2, True)]


# -- invariants -------------------------------------------------------------------------------

def test_injected_run_matches_clean_before_injection(uc2, uc2_backend):
    clean = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), uc2_backend)
    hit = run(uc2, RunConfig(Strategy.RSTD, injection=parse_injection(UC2_INJECTION), **FROZEN), uc2_backend)
    k = next(i for i, c in enumerate(hit.calls) if c.injection_applied)
    assert [strip_timing(c.to_dict()) for c in hit.calls[:k]] == [strip_timing(c.to_dict()) for c in clean.calls[:k]]


def test_determinism_and_token_conservation(uc1, uc1_backend):
    cfg = RunConfig(Strategy.STATIC, injection=parse_injection(UC1_INJECTION), seed=3)
    a, b = run(uc1, cfg, uc1_backend), run(uc1, cfg, uc1_backend)
    strip = lambda r: [strip_timing(x) for x in r.records()]
    assert strip(a) == strip(b)
    assert a.total_tokens == sum(c.prompt_tokens + c.completion_tokens for c in a.calls)
    assert a.retry_tokens == sum(c.tokens for c in a.calls if c.retry_flag) <= a.total_tokens


def test_framework_overhead(uc2, uc2_backend):
    frozen = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), uc2_backend)
    assert frozen.wall_seconds == pytest.approx(frozen.model_seconds)
    assert measure_framework_overhead(frozen) == pytest.approx(0.0, abs=1e-9)
    zero = script_backend([{"subtask": "N0", "response": {"ok": True}}])
    rep = run(dag_pipeline(1, []), RunConfig(Strategy.RSTD, clock="system"), zero)
    assert rep.model_seconds == 0
    assert measure_framework_overhead(rep) == pytest.approx(rep.wall_seconds)


def test_transport_errors_are_redispatched(uc2, uc2_backend):
    class Flaky:
        def __init__(self, failures):
            self.failures = failures

        def complete(self, request, key, ctx):
            if key == ("S2", 1) and self.failures:
                self.failures -= 1
                raise TransportError("reset")
            return uc2_backend.complete(request, key, ctx)

    report = run(uc2, RunConfig(Strategy.RSTD, **FROZEN), Flaky(2))
    assert calls(report) == [(s, 1, False) for s in ("S1", "S2", "S3", "S4", "S5")]
    with pytest.raises(TransportError):
        run(uc2, RunConfig(Strategy.RSTD, **FROZEN), Flaky(3))


def test_per_subtask_model_substitution(uc2, uc2_backend):
    doc = pipeline_to_dict(uc2)
    doc["subtasks"][3]["model_ref"] = "small"
    p = pipeline_from_dict(doc)
    seen = []

    class Recording:
        def complete(self, request, key, ctx):
            seen.append((request.model_ref, key[0]))
            return uc2_backend.complete(request, key, ctx)

    report = run(p, RunConfig(Strategy.RSTD, **FROZEN), {"default": uc2_backend, "small": Recording()})
    assert seen == [("small", "S4")]
    assert report.call_count == 5


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(costs=st.lists(st.integers(500, 3000), min_size=5, max_size=5), mono=st.integers(500, 6000))
def test_retry_cost_ordering(uc2, costs, mono):
    entries = []
    for sid, c in zip(["S1", "S2", "S3", "S4", "S5", "monolithic"], [*costs, mono]):
        base = next(e for e in script_doc("uc2-script")["entries"] if e["subtask"] == sid)
        for att in (1, 2):
            entries.append({"subtask": sid, "attempt": att, "response": base["response"], "total_tokens": c})
    backend = script_backend(entries)
    inj = parse_injection(UC2_INJECTION)
    r = {s: run(uc2, RunConfig(s, injection=inj, **FROZEN), backend).retry_tokens for s in Strategy}
    assert r[Strategy.RSTD] == costs[2]
    assert r[Strategy.STATIC] == sum(costs[2:])
    assert r[Strategy.MONOLITHIC] == mono
    if sum(costs[2:]) > mono > costs[2]:
        assert r[Strategy.STATIC] > r[Strategy.MONOLITHIC] > r[Strategy.RSTD]
