"""Metrics computed from run event logs, and their serialization."""
from __future__ import annotations

import csv
import json
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cost_model import DomainError


class EventLogError(ValueError):
    pass


@dataclass
class RunMetrics:
    throughput: float = 0.0  # output tokens / s over the makespan
    avg_per_token_latency: float = 0.0  # us
    per_request_latencies: dict = field(default_factory=dict)  # id -> us per token
    strategy_histogram: dict = field(default_factory=dict)
    decode_intensive_fraction: float = 0.0  # b
    gpu_cpu_power_ratio: float | None = None  # a
    speedup_estimate: float | None = None  # b / a
    rejected_count: int = 0
    incomplete_count: int = 0
    iterations: int = 0
    makespan_us: float = 0.0
    total_tokens: int = 0
    tokens_gpu: int = 0
    tokens_cpu: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        """Scalar view for CSV rows."""
        d = {k: v for k, v in self.to_dict().items() if not isinstance(v, dict)}
        for kind, n in sorted(self.strategy_histogram.items()):
            d[f"iters_{kind}"] = n
        return d


def per_token_latency(arrival_us: float, completion_us: float, output_len: int) -> float:
    if output_len < 1:
        raise DomainError("output_len must be >= 1")
    return (completion_us - arrival_us) / output_len


def speedup_estimate(a: float, b: float) -> float:
    """Approximate gain available from CPU offload: b / a."""
    if not a > 0:
        raise DomainError(f"a must be positive, got {a}")
    if not 0 <= b <= 1:
        raise DomainError(f"b must be in [0, 1], got {b}")
    return b / a


def _validate(events):
    for n, ev in enumerate(events):
        if not isinstance(ev, dict) or "t_us" not in ev or "kind" not in ev:
            raise EventLogError(f"event #{n} is not a well-formed event object")
        yield ev


def summarize(events) -> RunMetrics:
    """Aggregate an event log (sequence of event dicts) into run metrics.

    b is the share of iteration time spent in iterations without any prefill
    tokens; a is the median GPU/CPU attention-rate ratio over all scheduling
    decisions that saw CPU-resident requests.
    """
    m = RunMetrics()
    arrivals: dict[str, float] = {}
    first_arrival = None
    last_complete = None
    hist: Counter = Counter()
    ratios = []
    total_time = decode_time = 0.0
    for ev in _validate(events):
        kind, t, d = ev["kind"], ev["t_us"], ev.get("detail", {})
        rid = ev.get("request_id")
        if kind == "arrival":
            arrivals[rid] = t
            first_arrival = t if first_arrival is None else min(first_arrival, t)
        elif kind == "reject":
            m.rejected_count += 1
        elif kind == "decide":
            hist[ev["strategy"]] += 1
            if d.get("num_cpu", 0) > 0 and d.get("n_c", 0) > 0:
                ratios.append(d["n_g"] / d["n_c"])
        elif kind == "iteration_start":
            m.iterations += 1
            total_time += d["duration"]
            if d.get("prefill_tokens", 0) == 0:
                decode_time += d["duration"]
        elif kind == "token_emit":
            m.total_tokens += 1
            if d.get("device") == "cpu":
                m.tokens_cpu += 1
            else:
                m.tokens_gpu += 1
        elif kind == "complete":
            arr = d.get("arrival_us", arrivals.get(rid))
            m.per_request_latencies[rid] = per_token_latency(arr, t, d["output_len"])
            last_complete = t if last_complete is None else max(last_complete, t)
    m.strategy_histogram = dict(sorted(hist.items()))
    m.incomplete_count = len(set(arrivals) - set(m.per_request_latencies)) - m.rejected_count
    m.per_request_latencies = dict(sorted(m.per_request_latencies.items()))
    if m.per_request_latencies:
        m.avg_per_token_latency = statistics.fmean(m.per_request_latencies.values())
    if last_complete is not None and first_arrival is not None and last_complete > first_arrival:
        m.makespan_us = last_complete - first_arrival
        m.throughput = m.total_tokens / (m.makespan_us * 1e-6)
    m.decode_intensive_fraction = decode_time / total_time if total_time > 0 else 0.0
    if ratios:
        m.gpu_cpu_power_ratio = statistics.median(ratios)
        m.speedup_estimate = speedup_estimate(m.gpu_cpu_power_ratio, m.decode_intensive_fraction)
    return m


# --- serialization ---------------------------------------------------------


def dumps_event(ev: dict) -> str:
    return json.dumps(ev, sort_keys=True, separators=(",", ":"))


def write_events(events, path: str | Path):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(dumps_event(ev) + "\n")


def load_events(path: str | Path) -> list[dict]:
    """Read a JSON-lines event log; corrupt records are reported by byte offset."""
    data = Path(path).read_bytes()
    events = []
    offset = 0
    for raw in data.splitlines(keepends=True):
        if raw.strip():
            try:
                ev = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise EventLogError(f"{path}: corrupt event at byte offset {offset}: {exc}") from None
            if not isinstance(ev, dict) or "t_us" not in ev or "kind" not in ev:
                raise EventLogError(f"{path}: malformed event at byte offset {offset}")
            events.append(ev)
        offset += len(raw)
    return events


def metrics_json(metrics: RunMetrics) -> str:
    return json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n"


def write_metrics_json(metrics: RunMetrics, path: str | Path):
    Path(path).write_text(metrics_json(metrics))


def write_metrics_csv(rows: list[dict], path: str | Path):
    """One row per run; columns are the union of all row keys."""
    cols: list[str] = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow(row)
