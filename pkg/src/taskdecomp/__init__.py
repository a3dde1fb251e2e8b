"""Runtime-structured task decomposition for LLM pipelines.

A pipeline is a DAG of typed subtasks.  The engine runs it under one of three
strategies (monolithic, static, rstd) and records per-call telemetry so the
strategies can be compared on cost, latency and retry overhead.
"""

from .backends import HttpBackend, HttpConfig, MockBackend, MockScript
from .bench import BenchPlan, load_backend, load_pipeline, run_bench
from .engine import RunConfig, compute_retry_set, run, run_repetitions
from .errors import ConfigError, HardFailure, TaskDecompError, TransportError
from .faults import InjectionMode, InjectionSpec, parse_injection
from .metrics import CallRecord, RunReport, aggregate, failure_rate, retry_tokens
from .pipeline import PipelineSpec, Strategy, SubtaskSpec, parse_pipeline, topological_order
from .schema import SchemaNode, ValidationReport, validate
from .state import StateStore, SubtaskStatus

__all__ = [
    "BenchPlan", "CallRecord", "ConfigError", "HardFailure", "HttpBackend", "HttpConfig",
    "InjectionMode", "InjectionSpec", "MockBackend", "MockScript", "PipelineSpec", "RunConfig",
    "RunReport", "SchemaNode", "StateStore", "Strategy", "SubtaskSpec", "SubtaskStatus",
    "TaskDecompError", "TransportError", "ValidationReport", "aggregate", "compute_retry_set",
    "failure_rate", "load_backend", "load_pipeline", "parse_injection", "parse_pipeline",
    "retry_tokens", "run", "run_bench", "run_repetitions", "topological_order", "validate",
]
