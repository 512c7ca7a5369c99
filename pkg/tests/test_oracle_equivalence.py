"""Engine vs the history-replaying reference simulator on small instances.

The exhaustive sweep lives in the acceptance suite; these are the quick
variants: hand-picked cases plus random arrival times off the grid.
"""
from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridsim.engine import run
from hybridsim.scheduler import Override
from hybridsim.workload import Request
from brute_force import canonical, simulate
from small_world import CAPACITIES, STRATEGIES, tiny_config, tiny_profile


def same(reqs, prof, cfg):
    ours = canonical(run(reqs, prof, cfg).events)
    ref = canonical(simulate(reqs, prof, cfg, cfg.max_iterations))
    assert ours == ref
    return ours


@pytest.mark.parametrize("ov, ratio", STRATEGIES)
@pytest.mark.parametrize("caps", CAPACITIES)
def test_three_requests_two_layers(ov, ratio, caps):
    reqs = [Request("r0", 0.0, 2, 3), Request("r1", 0.0, 1, 3), Request("r2", 150.0, 2, 1)]
    events = same(reqs, tiny_profile(2, *caps), tiny_config(ov, ratio))
    if ov is Override.GPU_ONLY and caps[0] == 0:
        assert sum('"reject"' in e for e in events) == 3  # no GPU room and no host offload
    else:
        assert any('"iteration_start"' in e for e in events)


def test_rejection_and_idle_gap():
    reqs = [Request("big", 0.0, 9, 9), Request("late", 10_000.0, 1, 1)]
    events = same(reqs, tiny_profile(1, 4, 8), tiny_config(Override.AUTO, 1.0))
    assert sum('"reject"' in e for e in events) == 1


def test_async_results_consumed_late():
    # host-resident requests only: every decode goes through the host server
    reqs = [Request(f"r{i}", 0.0, 1, 3) for i in range(3)]
    events = same(reqs, tiny_profile(2, 0, 12), tiny_config(Override.ASYNC, 8.0, max_iterations=8))
    assert any('"sync"' in e for e in events)


@settings(max_examples=120, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 3), st.integers(1, 4), st.floats(0, 400)), min_size=1, max_size=3),
    st.sampled_from(STRATEGIES),
    st.sampled_from(CAPACITIES),
    st.integers(1, 2),
    st.integers(1, 7),
)
def test_random_arrivals(shapes, strategy, caps, layers, iters):
    reqs = [Request(f"r{i}", t, p, o) for i, (p, o, t) in enumerate(shapes)]
    same(reqs, tiny_profile(layers, *caps), tiny_config(*strategy, max_iterations=iters))
