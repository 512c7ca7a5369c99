from __future__ import annotations

import sys
from pathlib import Path

import pytest

from hybridsim.cost_model import HardwareProfile, ProfilePoint, load_profile

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).parent))


def make_profile(
    linear=((1, 100.0), (4096, 100.0)),
    gpu=((1, 1, 170.0), (1, 10**7, 170.0)),
    cpu=((1, 1, 200.0), (1, 10**7, 200.0)),
    **kw,
) -> HardwareProfile:
    """Profile with flat tables by default, so per-layer costs are constants."""
    args = dict(
        num_layers=1, gpu_mem_bytes=1e12, cpu_mem_bytes=1e12, pcie_bandwidth=1e30,
        pcie_latency=0.0, kv_bytes_per_token=1.0, weights_bytes=0.0, per_iteration_overhead=0.0,
    )
    args.update(kw)
    return HardwareProfile(
        linear_table=tuple(ProfilePoint(t, l) for t, l in linear),
        gpu_attn_table=tuple(ProfilePoint(b, l, k) for b, k, l in gpu),
        cpu_attn_table=tuple(ProfilePoint(b, l, k) for b, k, l in cpu),
        **args,
    )


@pytest.fixture
def flat_profile():
    return make_profile()


@pytest.fixture(scope="session")
def v100():
    return load_profile(ROOT / "profiles" / "v100_dual_epyc.json")


@pytest.fixture(scope="session")
def root():
    return ROOT


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
