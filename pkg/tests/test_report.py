from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridsim.cost_model import DomainError
from hybridsim.report import (
    EventLogError,
    load_events,
    metrics_json,
    per_token_latency,
    speedup_estimate,
    summarize,
    write_events,
    write_metrics_csv,
)


def ev(t, kind, rid=None, strategy=None, **detail):
    e = {"t_us": t, "kind": kind, "detail": detail}
    if rid:
        e["request_id"] = rid
    if strategy:
        e["strategy"] = strategy
    return e


THREE_ITERATIONS = [
    ev(0, "arrival", "a", prompt_len=5, output_len=2),
    ev(0, "arrival", "b", prompt_len=5, output_len=1),
    ev(0, "decide", strategy="gpu_only", num_cpu=0),
    ev(0, "iteration_start", strategy="gpu_only", duration=100.0, prefill_tokens=10),
    ev(100, "token_emit", "a", device="gpu"),
    ev(100, "token_emit", "b", device="gpu"),
    ev(100, "complete", "b", arrival_us=0, output_len=1),
    ev(100, "decide", strategy="async_overlap", num_cpu=1, n_g=20.0, n_c=2.0),
    ev(100, "iteration_start", strategy="async_overlap", duration=50.0, prefill_tokens=0),
    ev(150, "arrival", "c", prompt_len=1, output_len=1),
    ev(150, "token_emit", "a", device="gpu"),
    ev(150, "complete", "a", arrival_us=0, output_len=2),
    ev(150, "decide", strategy="asymmetric_pipelining", num_cpu=2, n_g=30.0, n_c=1.0),
    ev(150, "iteration_start", strategy="asymmetric_pipelining", duration=30.0, prefill_tokens=0),
    ev(180, "token_emit", "c", device="cpu"),
    ev(180, "complete", "c", arrival_us=150, output_len=1),
]


def test_hand_built_log():
    m = summarize(THREE_ITERATIONS)
    assert m.iterations == 3 and m.total_tokens == 4
    assert (m.tokens_gpu, m.tokens_cpu) == (3, 1)
    assert m.makespan_us == 180
    assert m.throughput == pytest.approx(4 / 180e-6)
    assert m.per_request_latencies == {"a": 75.0, "b": 100.0, "c": 30.0}
    assert m.avg_per_token_latency == pytest.approx((75 + 100 + 30) / 3)
    assert m.decode_intensive_fraction == pytest.approx(80 / 180)
    assert m.gpu_cpu_power_ratio == pytest.approx(20.0)  # median of 10 and 30
    assert m.speedup_estimate == pytest.approx((80 / 180) / 20)
    assert m.strategy_histogram == {"asymmetric_pipelining": 1, "async_overlap": 1, "gpu_only": 1}
    assert m.incomplete_count == 0


def test_single_strategy_histogram():
    log = [e for e in THREE_ITERATIONS if e["kind"] != "decide"] + [ev(0, "decide", strategy="gpu_only")] * 4
    m = summarize(log)
    assert m.strategy_histogram == {"gpu_only": 4}
    assert m.gpu_cpu_power_ratio is None and m.speedup_estimate is None


def test_pure_function_of_log():
    assert metrics_json(summarize(THREE_ITERATIONS)) == metrics_json(summarize(list(THREE_ITERATIONS)))


@pytest.mark.parametrize("arr, done, n, expected", [(0, 1000, 10, 100.0), (50, 80, 1, 30.0)])
def test_per_token_latency(arr, done, n, expected):
    assert per_token_latency(arr, done, n) == expected


def test_per_token_latency_domain():
    with pytest.raises(DomainError):
        per_token_latency(0, 1, 0)


@pytest.mark.parametrize("a, b, expected", [(10, 1, 0.10), (10, 0, 0.0), (2, 0.5, 0.25)])
def test_speedup_estimate(a, b, expected):
    assert speedup_estimate(a, b) == pytest.approx(expected)


@pytest.mark.parametrize("a, b", [(0, 0.5), (-1, 0.5), (5, 1.5), (5, -0.1)])
def test_speedup_domain(a, b):
    with pytest.raises(DomainError):
        speedup_estimate(a, b)


@given(st.floats(1e-3, 1e3), st.floats(0, 1), st.floats(0, 1))
def test_speedup_monotone_in_b(a, b1, b2):
    lo, hi = sorted((b1, b2))
    assert speedup_estimate(a, lo) <= speedup_estimate(a, hi)


def test_event_round_trip(tmp_path):
    p = tmp_path / "events.jsonl"
    write_events(THREE_ITERATIONS, p)
    assert load_events(p) == THREE_ITERATIONS


def test_corrupt_log_byte_offset(tmp_path):
    p = tmp_path / "events.jsonl"
    good = json.dumps(THREE_ITERATIONS[0]) + "\n"
    p.write_text(good + good + '{"t_us": 3, "kind":\n')
    with pytest.raises(EventLogError, match=f"byte offset {2 * len(good.encode())}"):
        load_events(p)


def test_malformed_record(tmp_path):
    p = tmp_path / "events.jsonl"
    p.write_text('{"t_us": 1}\n')
    with pytest.raises(EventLogError, match="byte offset 0"):
        load_events(p)
    with pytest.raises(EventLogError):
        summarize([{"kind": "arrival"}])


def test_csv_union_of_columns(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics_csv([{"a": 1}, {"a": 2, "b": 3}], p)
    assert p.read_text().splitlines() == ["a,b", "1,", "2,3"]
