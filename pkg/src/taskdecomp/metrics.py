"""Per-call telemetry, run reports, aggregation and table export."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .errors import MixedConfig
from .pipeline import Strategy

MONOLITHIC_KEY = "monolithic"

# fields whose values depend on real elapsed time
TIMING_FIELDS = frozenset({"wall_seconds", "framework_seconds", "framework_latency"})


class Outcome(str, Enum):
    SUCCESS = "success"
    HARD_FAILURE = "hard_failure"


@dataclass(frozen=True)
class CallRecord:
    run_index: int
    subtask: str
    attempt: int
    prompt_tokens: int
    completion_tokens: int
    model_latency: float
    framework_latency: float
    validation_passed: bool
    retry_flag: bool
    injection_applied: bool
    prompt: str = ""
    response_text: str = ""
    errors: tuple[dict[str, str], ...] = ()

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["errors"] = list(self.errors)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CallRecord":
        names = cls.__dataclass_fields__
        kwargs = {k: v for k, v in d.items() if k in names}
        kwargs["errors"] = tuple(kwargs.get("errors", ()))
        return cls(**kwargs)


@dataclass
class RunReport:
    pipeline_id: str
    strategy: Strategy
    run_index: int = 1
    seed: int = 0
    injected: bool = False
    calls: list[CallRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    outcome: Outcome = Outcome.SUCCESS
    correct: bool = False
    error: str | None = None
    state: list[dict[str, Any]] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(c.tokens for c in self.calls)

    @property
    def retry_tokens(self) -> int:
        return retry_tokens(self)

    @property
    def model_seconds(self) -> float:
        return sum(c.model_latency for c in self.calls)

    @property
    def framework_seconds(self) -> float:
        return self.wall_seconds - self.model_seconds

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def summary(self) -> dict[str, Any]:
        return {
            "record": "run",
            "pipeline_id": self.pipeline_id,
            "strategy": self.strategy.value,
            "run_index": self.run_index,
            "seed": self.seed,
            "injected": self.injected,
            "call_count": self.call_count,
            "total_tokens": self.total_tokens,
            "retry_tokens": self.retry_tokens,
            "wall_seconds": self.wall_seconds,
            "model_seconds": self.model_seconds,
            "framework_seconds": self.framework_seconds,
            "outcome": self.outcome.value,
            "correct": self.correct,
            "error": self.error,
            "state": self.state,
        }

    def records(self) -> Iterator[dict[str, Any]]:
        """The run as a record stream: one record per call, then the run summary."""
        head = {
            "record": "call",
            "pipeline_id": self.pipeline_id,
            "strategy": self.strategy.value,
            "injected": self.injected,
        }
        for c in self.calls:
            yield {**head, **c.to_dict()}
        yield self.summary()


def retry_tokens(report: RunReport) -> int:
    return sum(c.tokens for c in report.calls if c.retry_flag)


def measure_framework_overhead(report: RunReport) -> float:
    """Wall-clock duration minus time spent inside model calls."""
    return report.wall_seconds - sum(c.model_latency for c in report.calls)


def failure_rate(reports: Sequence[RunReport], subtask: str) -> float:
    """Natural validation-failure rate of ``subtask``.

    Counts first-pass executions only: retry-attributed attempts are recovery,
    not fresh executions, and injected attempts never count as failures.
    """
    if not reports:
        raise ValueError("failure_rate needs at least one report")
    total = failed = 0
    for rep in reports:
        for c in rep.calls:
            if c.subtask != subtask or c.retry_flag:
                continue
            total += 1
            if not c.validation_passed and not c.injection_applied:
                failed += 1
    return failed / total if total else 0.0


# --------------------------------------------------------------------------
# record streams


def dumps_record(record: Mapping[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=False)


def write_records(reports: Iterable[RunReport], fh: io.TextIOBase | Any) -> None:
    for rep in reports:
        for rec in rep.records():
            fh.write(dumps_record(rec) + "\n")


def read_records(lines: Iterable[str]) -> list[RunReport]:
    """Rebuild run reports from a record stream (inverse of :func:`write_records`)."""
    pending: dict[tuple[str, str, bool, int], list[CallRecord]] = {}
    reports: list[RunReport] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        kind = rec.get("record")
        if kind == "call":
            key = (rec["pipeline_id"], rec["strategy"], rec["injected"], rec["run_index"])
            pending.setdefault(key, []).append(CallRecord.from_dict(rec))
        elif kind == "run":
            key = (rec["pipeline_id"], rec["strategy"], rec["injected"], rec["run_index"])
            reports.append(
                RunReport(
                    pipeline_id=rec["pipeline_id"],
                    strategy=Strategy(rec["strategy"]),
                    run_index=rec["run_index"],
                    seed=rec.get("seed", 0),
                    injected=rec["injected"],
                    calls=pending.pop(key, []),
                    wall_seconds=rec["wall_seconds"],
                    outcome=Outcome(rec["outcome"]),
                    correct=rec["correct"],
                    error=rec.get("error"),
                    state=rec.get("state", []),
                )
            )
        elif kind != "state":
            raise ValueError(f"line {lineno}: unknown record type {kind!r}")
    return reports


def strip_timing(record: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in record.items() if k not in TIMING_FIELDS}


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Stat:
    mean: float
    sd: float
    n: int


def mean_sd(samples: Sequence[float]) -> Stat:
    """Mean and sample standard deviation (n-1 denominator; 0 for one sample)."""
    if not samples:
        raise ValueError("no samples")
    if len(samples) == 1:
        return Stat(float(samples[0]), 0.0, 1)
    return Stat(statistics.fmean(samples), statistics.stdev(samples), len(samples))


METRICS = ("total_tokens", "wall_seconds", "model_seconds", "framework_seconds", "call_count", "retry_tokens")


@dataclass(frozen=True)
class AggregateTable:
    pipeline_id: str
    strategy: Strategy
    injected: bool
    n: int
    metrics: Mapping[str, Stat]
    correct_fraction: float
    hard_failures: int


def aggregate(reports: Sequence[RunReport]) -> AggregateTable:
    if not reports:
        raise ValueError("aggregate needs at least one report")
    configs = {(r.pipeline_id, r.strategy, r.injected) for r in reports}
    if len(configs) > 1:
        raise MixedConfig(f"reports mix configurations: {sorted(map(str, configs))}")
    ordered = sorted(reports, key=lambda r: r.run_index)
    metrics = {name: mean_sd([float(getattr(r, name)) for r in ordered]) for name in METRICS}
    first = ordered[0]
    return AggregateTable(
        pipeline_id=first.pipeline_id,
        strategy=first.strategy,
        injected=first.injected,
        n=len(ordered),
        metrics=metrics,
        correct_fraction=sum(r.correct for r in ordered) / len(ordered),
        hard_failures=sum(r.outcome is Outcome.HARD_FAILURE for r in ordered),
    )


# --------------------------------------------------------------------------
# comparison tables

_COLUMN_TITLES = {Strategy.MONOLITHIC: "Mono.", Strategy.STATIC: "Static", Strategy.RSTD: "RSTD"}
ROWS = ("Tokens", "Latency s", "LLM API s", "Framework s", "LLM calls", "Correct", "Retry tokens")


@dataclass(frozen=True)
class ComparisonTable:
    pipeline_id: str
    clean: Mapping[Strategy, AggregateTable]
    injected: Mapping[Strategy, AggregateTable]

    @property
    def strategies(self) -> list[Strategy]:
        present = set(self.clean) | set(self.injected)
        return [s for s in Strategy if s in present]

    def retry_stat(self, strategy: Strategy) -> Stat | None:
        source = self.injected.get(strategy) or self.clean.get(strategy)
        return source.metrics["retry_tokens"] if source else None

    def cell(self, row: str, strategy: Strategy) -> tuple[float, float] | None:
        if row == "Retry tokens":
            st = self.retry_stat(strategy)
            return (st.mean, st.sd) if st else None
        agg = self.clean.get(strategy) or self.injected.get(strategy)
        if agg is None:
            return None
        if row == "Correct":
            return (agg.correct_fraction, 0.0)
        name = {
            "Tokens": "total_tokens",
            "Latency s": "wall_seconds",
            "LLM API s": "model_seconds",
            "Framework s": "framework_seconds",
            "LLM calls": "call_count",
        }[row]
        st = agg.metrics[name]
        return (st.mean, st.sd)

    def deltas(self) -> list[tuple[str, float]]:
        """Relative retry-token differences, as percentages."""
        means = {s: st.mean for s in self.strategies if (st := self.retry_stat(s)) is not None}
        pairs = [
            ("static vs mono", Strategy.STATIC, Strategy.MONOLITHIC),
            ("rstd vs mono", Strategy.RSTD, Strategy.MONOLITHIC),
            ("rstd vs static", Strategy.RSTD, Strategy.STATIC),
        ]
        out = []
        for label, a, b in pairs:
            if a in means and b in means and means[b] > 0:
                out.append((label, 100.0 * (means[a] - means[b]) / means[b]))
        return out

    def hard_failures(self) -> int:
        return sum(a.hard_failures for a in [*self.clean.values(), *self.injected.values()])


def build_tables(reports: Sequence[RunReport]) -> list[ComparisonTable]:
    groups: dict[tuple[str, Strategy, bool], list[RunReport]] = {}
    for r in reports:
        groups.setdefault((r.pipeline_id, r.strategy, r.injected), []).append(r)
    pipelines = list(dict.fromkeys(r.pipeline_id for r in reports))
    tables = []
    for pid in pipelines:
        clean = {s: aggregate(g) for (p, s, inj), g in groups.items() if p == pid and not inj}
        injected = {s: aggregate(g) for (p, s, inj), g in groups.items() if p == pid and inj}
        tables.append(ComparisonTable(pid, clean, injected))
    return tables


def _fmt(row: str, mean: float, sd: float) -> str:
    if row == "Correct":
        return f"{100 * mean:.0f}%"
    if row == "LLM calls":
        return f"{mean:g}" if sd == 0 else f"{mean:.1f} ± {sd:.1f}"
    if row in ("Tokens", "Retry tokens"):
        return f"{mean:.0f} ± {sd:.0f}"
    return f"{mean:.2f} ± {sd:.2f}"


def render_text(table: ComparisonTable) -> str:
    strategies = table.strategies
    header = ["Metric", *(_COLUMN_TITLES[s] for s in strategies)]
    body = []
    for row in ROWS:
        cells = [("  " + row) if row in ("LLM API s", "Framework s") else row]
        for s in strategies:
            c = table.cell(row, s)
            cells.append("-" if c is None else _fmt(row, *c))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = [f"Pipeline {table.pipeline_id}"]
    for cells in [header, *body]:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))))
    deltas = table.deltas()
    if deltas:
        lines.append("Retry-token deltas: " + "; ".join(f"{label} {pct:+.1f}%" for label, pct in deltas))
    if table.hard_failures():
        lines.append(f"WARNING: {table.hard_failures()} run(s) hard-failed; figures include partial telemetry")
    return "\n".join(lines) + "\n"


def render_csv(tables: Sequence[ComparisonTable]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pipeline", "metric", "strategy", "mean", "sd"])
    for t in tables:
        for row in ROWS:
            for s in t.strategies:
                c = t.cell(row, s)
                if c is not None:
                    writer.writerow([t.pipeline_id, row, s.value, f"{c[0]:.6f}", f"{c[1]:.6f}"])
        for label, pct in t.deltas():
            writer.writerow([t.pipeline_id, "Retry tokens delta %", label, f"{pct:.6f}", ""])
    return buf.getvalue()
