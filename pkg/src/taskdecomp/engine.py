"""Executes a pipeline under one of three strategies.

monolithic
    One compiled prompt, one call.  A failed output triggers exactly one full
    re-call; a second failure is a hard failure.
static
    Subtasks run once each in topological order.  Validation is recorded but
    nothing reacts to it mid-pipeline, and failed outputs are forwarded
    downstream as-is.  After the pass, the union of the configured static
    retry sets for every detected failure is re-executed in order.
rstd
    Subtasks run in topological order behind the validation gate.  A failing
    subtask gets repair attempts (original prompt + violations + previous
    output).  If its repair budget is exhausted and its retry set names
    upstream subtasks, those are re-executed with the downstream violations
    appended and execution resumes.  Low-content outputs activate skip arcs.

Retry attribution: every call made for a subtask in the active retry set
(including repair attempts) carries ``retry_flag``.  Subtasks re-run only
because their inputs changed after an upstream retry are resume calls and
are not retry-flagged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

from . import faults, valuepath
from .backends import Backends, CallContext, ModelRequest, ModelResponse, backend_for
from .clock import make_clock
from .errors import HardFailure, TransportError
from .faults import InjectionMode, InjectionSpec
from .metrics import MONOLITHIC_KEY, CallRecord, Outcome, RunReport
from .pipeline import (
    ROOT,
    PipelineSpec,
    Strategy,
    SubtaskSpec,
    check_ground_truth,
    downstream_closure,
    in_order,
    render,
    resolve_failure_policy,
    skip_targets,
    topological_order,
)
from .schema import (
    Kind,
    NoParsableValue,
    SchemaNode,
    ValidationReport,
    build_repair_prompt,
    check_content_signal,
    parse_value,
    unparsable_report,
    validate,
)
from .state import StateEntry, StateStore, SubtaskStatus, inputs_as_text

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# decisions


class DecisionKind(str, Enum):
    PROCEED = "proceed"
    SKIP = "skip"
    RETRY = "retry"
    FAIL = "fail"


@dataclass(frozen=True)
class BranchDecision:
    kind: DecisionKind
    targets: tuple[str, ...] = ()
    low_content: bool = False


PROCEED = BranchDecision(DecisionKind.PROCEED)
RETRY = BranchDecision(DecisionKind.RETRY)
FAIL = BranchDecision(DecisionKind.FAIL)


def evaluate_branch_signals(entry: StateEntry, subtask: SubtaskSpec, pipeline: PipelineSpec) -> BranchDecision:
    """Decide what follows a finished subtask from its validated state."""
    if entry.status is SubtaskStatus.FAILED:
        return FAIL
    if entry.status is not SubtaskStatus.COMPLETED:
        raise ValueError(f"cannot branch on a {entry.status.value} subtask")
    if check_content_signal(entry.value, subtask.confidence_path, subtask.confidence_threshold):
        return PROCEED
    targets = skip_targets(pipeline, subtask.id)
    if targets:
        return BranchDecision(DecisionKind.SKIP, targets=targets)
    return BranchDecision(DecisionKind.PROCEED, low_content=True)


def attempt_decision(report: ValidationReport, attempt_in_loop: int, max_attempts: int) -> BranchDecision:
    if report.passed:
        return PROCEED
    return RETRY if attempt_in_loop < max_attempts else FAIL


# --------------------------------------------------------------------------
# compiled monolithic prompt


def compile_monolithic(pipeline: PipelineSpec) -> str:
    if pipeline.monolithic_prompt is not None:
        return pipeline.monolithic_prompt
    order = topological_order(pipeline)
    sections = []
    for sid in order:
        sub = pipeline.subtask(sid)
        values = {}
        for k in sub.input_keys:
            values[k.key] = pipeline.root_inputs[k.key] if k.source == ROOT else f"<output of {k.source}>"
        body = render(sub.prompt_template, values)
        if len(order) == 1:
            return body
        sections.append(f"## {sid}: {sub.name}\n{body}")
    keys = ", ".join(f'"{sid}"' for sid in order)
    sections.append(f"Respond with a single JSON object with keys {keys}, one per step above.")
    return "\n\n".join(sections)


def monolithic_schema(pipeline: PipelineSpec) -> SchemaNode:
    """Schema of a monolithic answer: one property per subtask, all required."""
    if len(pipeline.subtasks) == 1:
        return pipeline.subtasks[0].output_schema
    order = topological_order(pipeline)
    return SchemaNode(
        Kind.OBJECT,
        properties=tuple((sid, pipeline.subtask(sid).output_schema) for sid in order),
        required=tuple(order),
    )


def compute_retry_set(pipeline: PipelineSpec, strategy: Strategy, failed_at: str) -> list[str]:
    order = topological_order(pipeline)
    policy = resolve_failure_policy(pipeline, failed_at)
    if strategy is Strategy.MONOLITHIC:
        return order
    if strategy is Strategy.STATIC:
        return list(policy.static_retry_set or ())
    return list(policy.rstd_retry_set or ())


# --------------------------------------------------------------------------
# run


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy
    repetitions: int = 1
    seed: int = 0
    injection: InjectionSpec | None = None
    clock: str = "simulated"
    temperature: float = 0.0
    transport_retries: int = 2

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class SubtaskResult:
    entry: StateEntry
    records: list[CallRecord]
    report: ValidationReport
    raw_output: str
    prompt: str


class _Run:
    def __init__(self, pipeline: PipelineSpec, config: RunConfig, backends: Backends, run_index: int) -> None:
        self.pipeline = pipeline
        self.config = config
        self.backends = backends
        self.injection = config.injection.check_against(pipeline) if config.injection else None
        self.clock = make_clock(config.clock)
        self.ctx = CallContext(run_index=run_index, seed=config.seed, clock=self.clock)
        self.order = topological_order(pipeline)
        self.store = StateStore(self.order, pipeline.root_inputs)
        self.report = RunReport(
            pipeline_id=pipeline.id,
            strategy=config.strategy,
            run_index=run_index,
            seed=config.seed,
            injected=self.injection is not None,
        )
        self.last_output: dict[str, tuple[str, str]] = {}  # sid -> (clean prompt, raw output)
        self._mark = 0.0

    # -- calls ----------------------------------------------------------

    def _call(self, key: str, attempt: int, prompt: str, model_ref: str) -> tuple[ModelResponse, float, float]:
        backend = backend_for(self.backends, model_ref)
        request = ModelRequest(model_ref, prompt, temperature=self.config.temperature)
        for tries in range(self.config.transport_retries + 1):
            dispatched = self.clock.now()
            try:
                response = backend.complete(request, (key, attempt), self.ctx)
            except TransportError:
                if tries == self.config.transport_retries:
                    raise
                log.warning("transport error on %s attempt %d; re-dispatching", key, attempt)
                continue
            return response, dispatched, self.clock.now()
        raise AssertionError("unreachable")

    def _record(self, key: str, attempt: int, prompt: str, response: ModelResponse, dispatched: float,
                returned: float, report: ValidationReport, retry_flag: bool, injected: bool) -> CallRecord:
        done = self.clock.now()
        rec = CallRecord(
            run_index=self.ctx.run_index,
            subtask=key,
            attempt=attempt,
            prompt_tokens=response.prompt_tokens,
            completion_tokens=response.completion_tokens,
            model_latency=response.model_latency,
            framework_latency=max(dispatched - self._mark, 0.0) + max(done - returned, 0.0),
            validation_passed=report.passed,
            retry_flag=retry_flag,
            injection_applied=injected,
            prompt=prompt,
            response_text=response.text,
            errors=tuple(e.to_dict() for e in report.errors),
        )
        self._mark = done
        self.report.calls.append(rec)
        return rec

    # -- one subtask ----------------------------------------------------

    def execute_subtask(
        self,
        sid: str,
        *,
        max_attempts: int,
        retry_flag: bool = False,
        first_prompt: str | None = None,
        gated: bool = True,
    ) -> SubtaskResult:
        """Run the validation-and-repair loop for one subtask.

        ``gated=False`` is the static strategy: unvalidated upstream values
        are accepted and a failed output is kept for forwarding.
        """
        sub = self.pipeline.subtask(sid)
        records: list[CallRecord] = []
        inputs = self.store.assemble_inputs(sub, allow_unvalidated=not gated)
        clean_prompt = render(sub.prompt_template, inputs_as_text(sub, inputs))
        report = ValidationReport()
        raw = ""
        prompt = clean_prompt
        value: Any = None
        parsed = False
        for loop in range(1, max_attempts + 1):
            attempt = self.store.entry(sid).attempts + loop
            fire = faults.should_inject(self.injection, sid, attempt)
            used_inputs = inputs
            if fire and self.injection.mode is InjectionMode.DROP_FIELD:  # type: ignore[union-attr]
                used_inputs = faults.apply(self.injection, inputs)  # type: ignore[arg-type]
            if loop == 1:
                prompt = first_prompt or render(sub.prompt_template, inputs_as_text(sub, used_inputs))
            else:
                prompt = build_repair_prompt(clean_prompt, raw, report)
            response, dispatched, returned = self._call(sid, attempt, prompt, sub.model_ref)
            raw = response.text
            if fire and self.injection.mode is InjectionMode.CORRUPT_RESPONSE:  # type: ignore[union-attr]
                raw = faults.apply(self.injection, raw)  # type: ignore[arg-type]
            try:
                value = parse_value(raw)
                parsed = True
                report = validate(value, sub.output_schema)
            except NoParsableValue:
                value, parsed = None, False
                report = unparsable_report()
            report = self._check_inputs(sub, used_inputs) + report
            decision = attempt_decision(report, loop, max_attempts)
            records.append(
                self._record(sid, attempt, prompt, response, dispatched, returned, report,
                             retry_flag or loop > 1, fire)
            )
            self.last_output[sid] = (clean_prompt, raw)
            if decision.kind is DecisionKind.PROCEED:
                low = not check_content_signal(value, sub.confidence_path, sub.confidence_threshold)
                entry = self.store.write_validated(
                    sid, value, attempts=attempt, prompt_tokens=response.prompt_tokens,
                    completion_tokens=response.completion_tokens, low_content=low,
                )
                return SubtaskResult(entry, records, report, raw, clean_prompt)
            if decision.kind is DecisionKind.FAIL:
                break
        forwarded = value if parsed else raw
        entry = self.store.mark(sid, SubtaskStatus.FAILED, attempts=self.store.entry(sid).attempts + len(records),
                                unvalidated=None if gated else forwarded, has_unvalidated=not gated)
        return SubtaskResult(entry, records, report, raw, clean_prompt)

    def _check_inputs(self, sub: SubtaskSpec, inputs: dict[str, Any]) -> ValidationReport:
        """Re-check upstream values against their producer's schema.

        Values read through the gate always conform, so under rstd this only
        trips on tampered inputs.  Under static it also flags forwarded
        unvalidated values, which is detection only: nothing reacts until
        the post-pass retry.
        """
        out = ValidationReport()
        for k in sub.input_keys:
            if k.source == ROOT or k.key not in inputs:
                continue
            producer = self.pipeline.subtask(k.source)
            out = out + validate(inputs[k.key], producer.output_schema, root=f"$.{k.key}")
        return out

    # -- strategies -----------------------------------------------------

    def _hard_fail(self, message: str) -> HardFailure:
        self.report.outcome = Outcome.HARD_FAILURE
        self.report.error = message
        return HardFailure(message, self.report)

    def run_monolithic(self) -> Any:
        prompt = compile_monolithic(self.pipeline)
        schema = monolithic_schema(self.pipeline)
        single = len(self.pipeline.subtasks) == 1
        model_ref = self.pipeline.subtasks[0].model_ref
        for attempt in (1, 2):
            response, dispatched, returned = self._call(MONOLITHIC_KEY, attempt, prompt, model_ref)
            fire = self.injection is not None and self.injection.attempt == attempt
            try:
                value = parse_value(response.text)
                if fire:
                    value = self._inject_monolithic(value, single)
                report = validate(value, schema)
            except NoParsableValue:
                value, report = None, unparsable_report()
            self._record(MONOLITHIC_KEY, attempt, prompt, response, dispatched, returned, report,
                         attempt > 1, fire)
            if report.passed:
                self.report.state = [{
                    "subtask_id": MONOLITHIC_KEY, "status": SubtaskStatus.COMPLETED.value,
                    "attempts": attempt, "tokens": response.prompt_tokens + response.completion_tokens,
                    "value": value,
                }]
                return {self.pipeline.subtasks[0].id: value} if single else value
        raise self._hard_fail("monolithic output failed validation twice")

    def _inject_monolithic(self, value: Any, single: bool) -> Any:
        assert self.injection is not None
        path = faults.monolithic_path(self.injection, self.pipeline)
        if single:  # output is the subtask's value itself, not keyed by id
            steps = valuepath.parse_path(path)[1:]
            path = valuepath.format_path(steps)
        return faults.apply(
            InjectionSpec(self.injection.target_subtask, path, InjectionMode.DROP_FIELD, self.injection.attempt),
            value,
        )

    def run_static(self) -> None:
        detected: list[str] = []
        for sid in self.order:
            res = self.execute_subtask(sid, max_attempts=1, gated=False)
            if res.entry.status is SubtaskStatus.FAILED:
                detected.append(sid)
        if not detected:
            return
        retry_ids: set[str] = set()
        for sid in detected:
            retry_ids.update(compute_retry_set(self.pipeline, Strategy.STATIC, sid))
        for rid in in_order(self.order, retry_ids):
            self.store.reopen(rid)
            res = self.execute_subtask(rid, max_attempts=1, retry_flag=True, gated=False)
            if res.entry.status is SubtaskStatus.FAILED:
                raise self._hard_fail(f"static retry of {rid} failed validation")

    def run_rstd(self) -> None:
        escalated: set[str] = set()
        # failed subtasks listed in their own retry set: their resumed run is a retry
        self_retry: set[str] = set()
        i = 0
        while i < len(self.order):
            sid = self.order[i]
            status = self.store.status(sid)
            if status is not SubtaskStatus.PENDING:
                i += 1
                continue
            sub = self.pipeline.subtask(sid)
            if self._starved(sub):
                self.store.mark(sid, SubtaskStatus.SKIPPED)
                i += 1
                continue
            policy = resolve_failure_policy(self.pipeline, sid)
            res = self.execute_subtask(sid, max_attempts=policy.max_repair_attempts or 1,
                                       retry_flag=sid in self_retry)
            decision = evaluate_branch_signals(res.entry, sub, self.pipeline)
            if decision.kind is DecisionKind.FAIL:
                retry_set = list(policy.rstd_retry_set or ())
                if retry_set == [sid] or sid in escalated:
                    raise self._hard_fail(f"{sid} failed validation after {res.entry.attempts} attempt(s)")
                escalated.add(sid)
                if sid in retry_set:
                    self_retry.add(sid)
                self._retry_upstream(sid, retry_set, res.report)
                i = 0
                continue
            if decision.kind is DecisionKind.SKIP:
                for target in decision.targets:
                    if self.store.status(target) is SubtaskStatus.PENDING:
                        self.store.mark(target, SubtaskStatus.SKIPPED)
            i += 1

    def _starved(self, sub: SubtaskSpec) -> bool:
        return any(
            k.required and k.source != ROOT and self.store.status(k.source) is SubtaskStatus.SKIPPED
            for k in sub.input_keys
        )

    def _retry_upstream(self, failed: str, retry_set: list[str], report: ValidationReport) -> None:
        for rid in retry_set:
            if rid == failed:
                continue
            self.store.reopen(rid)
            clean_prompt, raw = self.last_output[rid]
            policy = resolve_failure_policy(self.pipeline, rid)
            res = self.execute_subtask(
                rid,
                max_attempts=policy.max_repair_attempts or 1,
                retry_flag=True,
                first_prompt=build_repair_prompt(clean_prompt, raw, report),
            )
            if res.entry.status is not SubtaskStatus.COMPLETED:
                raise self._hard_fail(f"retry of {rid} (blamed for {failed}) failed validation")
        # everything fed by a retried subtask must be recomputed
        stale: set[str] = set()
        for rid in retry_set:
            stale |= downstream_closure(self.pipeline, rid)
        stale.add(failed)
        for sid in stale:
            if sid in retry_set:
                continue
            if self.store.status(sid) in (SubtaskStatus.COMPLETED, SubtaskStatus.FAILED):
                self.store.reopen(sid)

    def outputs(self) -> dict[str, Any]:
        return {
            sid: self.store.read(sid) for sid in self.order if self.store.status(sid) is SubtaskStatus.COMPLETED
        }


def run(pipeline: PipelineSpec, config: RunConfig, backends: Backends, *, run_index: int = 1) -> RunReport:
    """Execute one run; raises ``HardFailure`` (carrying the partial report) if recovery fails."""
    state = _Run(pipeline, config, backends, run_index)
    start = state.clock.now()
    state._mark = start
    try:
        if config.strategy is Strategy.MONOLITHIC:
            outputs = state.run_monolithic()
        else:
            if config.strategy is Strategy.STATIC:
                state.run_static()
            else:
                state.run_rstd()
            outputs = state.outputs()
            state.report.state = state.store.snapshot()
        state.report.correct = check_ground_truth(pipeline, outputs)
    except HardFailure as exc:
        state.report.wall_seconds = state.clock.now() - start
        if config.strategy is not Strategy.MONOLITHIC:
            state.report.state = state.store.snapshot()
            exc.store = state.store
        raise
    except TransportError as exc:
        state.report.wall_seconds = state.clock.now() - start
        exc.report = state.report  # type: ignore[attr-defined]
        raise
    state.report.wall_seconds = state.clock.now() - start
    return state.report


def run_repetitions(pipeline: PipelineSpec, config: RunConfig, backends: Backends) -> list[RunReport]:
    """``config.repetitions`` runs with run indices 1..n; hard failures are kept as partial reports."""
    reports = []
    for i in range(1, config.repetitions + 1):
        try:
            reports.append(run(pipeline, config, backends, run_index=i))
        except HardFailure as exc:
            reports.append(exc.report)
    return reports
