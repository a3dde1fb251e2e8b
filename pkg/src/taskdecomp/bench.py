"""Benchmark plans: repetitions x strategies, clean and injected runs.

Every repetition makes a clean run; when an injection is configured it also
makes an injected run with the same run index.  Clean runs feed the cost and
latency rows of the comparison table, injected runs feed the retry row.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backends import Backends, HttpBackend, HttpConfig, MockBackend, MockScript
from .engine import RunConfig, run
from .errors import ConfigError, HardFailure
from .faults import InjectionSpec
from .metrics import RunReport
from .pipeline import PipelineSpec, Strategy, parse_pipeline

BUNDLED_PIPELINES = {"uc1": "uc1.json", "uc2": "uc2.json"}
BUNDLED_SCRIPTS = {
    "uc1-script": "uc1_script.json",
    "uc2-script": "uc2_script.json",
    "uc2-natural": "uc2_natural_script.json",
}


def asset_text(name: str) -> str:
    return resources.files("taskdecomp").joinpath("assets", name).read_text(encoding="utf-8")


def load_pipeline(ref: str) -> PipelineSpec:
    """A bundled name (``uc1``, ``uc2``) or a path to a pipeline config."""
    if ref in BUNDLED_PIPELINES:
        return parse_pipeline(asset_text(BUNDLED_PIPELINES[ref]))
    try:
        text = Path(ref).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read pipeline {ref!r}: {exc.strerror}") from None
    return parse_pipeline(text)


def load_backend(ref: str) -> Backends:
    """``mock:<bundled name or path>`` or ``http:<config path>``."""
    kind, sep, target = ref.partition(":")
    if not sep or not target:
        raise ConfigError(f"backend must be mock:<script> or http:<config>, got {ref!r}")
    if kind == "mock":
        if target in BUNDLED_SCRIPTS:
            import json

            return MockBackend(MockScript.from_dict(json.loads(asset_text(BUNDLED_SCRIPTS[target]))))
        if not Path(target).is_file():
            raise ConfigError(f"mock script {target!r} not found")
        return MockBackend(MockScript.load(target))
    if kind == "http":
        return HttpBackend(HttpConfig.load(target))
    raise ConfigError(f"unknown backend kind {kind!r}")


@dataclass(frozen=True)
class BenchPlan:
    pipeline: PipelineSpec
    strategies: tuple[Strategy, ...]
    repetitions: int = 10
    injection: InjectionSpec | None = None
    seed: int = 0
    clock: str = "simulated"
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.injection is not None:
            self.injection.check_against(self.pipeline)


def _one(pipeline: PipelineSpec, config: RunConfig, backends: Backends, run_index: int) -> RunReport:
    try:
        return run(pipeline, config, backends, run_index=run_index)
    except HardFailure as exc:
        return exc.report


def run_bench(plan: BenchPlan, backends: Backends) -> list[RunReport]:
    """Execute the plan.  Output order is fixed by (strategy, injected, run index)
    regardless of ``jobs``, so record streams merge deterministically."""
    jobs = []
    for strategy in plan.strategies:
        for injection in (None, plan.injection) if plan.injection else (None,):
            config = RunConfig(strategy, plan.repetitions, plan.seed, injection, plan.clock)
            jobs.extend((config, i) for i in range(1, plan.repetitions + 1))
    if plan.jobs == 1:
        return [_one(plan.pipeline, c, backends, i) for c, i in jobs]
    with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
        return list(pool.map(lambda job: _one(plan.pipeline, job[0], backends, job[1]), jobs))


def parse_strategies(text: str | Sequence[str]) -> tuple[Strategy, ...]:
    names = text.split(",") if isinstance(text, str) else list(text)
    try:
        out = tuple(dict.fromkeys(Strategy(n.strip()) for n in names if n.strip()))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not out:
        raise ConfigError("at least one strategy is required")
    return out
