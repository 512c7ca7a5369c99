"""Simulator and scheduler for hybrid CPU-GPU LLM inference serving."""
from .cost_model import (
    DomainError,
    HardwareProfile,
    ProfileError,
    ProfilePoint,
    attention_rates,
    cpu_attention_time,
    gpu_attention_time,
    linear_time,
    load_profile,
    pipelining_threshold,
)
from .engine import EngineConfig, IterationOutcome, RunResult, run
from .memory import Device, KvAccount, admit, kv_tokens_needed, release
from .report import RunMetrics, speedup_estimate, summarize
from .scheduler import Override, QueueSnapshot, SchedulerConfig, Strategy, StrategyDecision, decide
from .workload import Request, WorkloadSpec, load_trace, synthesize

__version__ = "0.1.0"
