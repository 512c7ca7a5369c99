from __future__ import annotations

import csv
import json

import pytest

from hybridsim.cli import compare, main, sweep
from hybridsim.config import ConfigError, load_config
from hybridsim.scheduler import Override


def write_config(tmp_path, profile, extra="", workload="num_requests = 6\noutput_len = 8\nprompt_len = 64\n"):
    p = tmp_path / "run.toml"
    p.write_text(f'profile = "{profile}"\noutput_dir = "{tmp_path / "out"}"\n{extra}\n[workload]\n{workload}')
    return p


@pytest.fixture
def cfg_path(tmp_path, root):
    return write_config(tmp_path, root / "profiles" / "v100_dual_epyc.json")


@pytest.fixture
def host_only_profile(tmp_path, root):
    # GPU memory left after weights is negative: every request lives in host memory
    doc = json.loads((root / "profiles" / "v100_dual_epyc.json").read_text())
    doc["gpu_mem_bytes"] = 14.5e9
    doc["cpu_mem_bytes"] = 1e11
    p = tmp_path / "host_only.json"
    p.write_text(json.dumps(doc))
    return p


def test_run_writes_three_artifacts(cfg_path, tmp_path, capsys):
    assert main(["run", "-c", str(cfg_path)]) == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["events.jsonl", "metrics.csv", "metrics.json"]
    m = json.loads((out / "metrics.json").read_text())
    assert m["total_tokens"] == 6 * 8
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1 and rows[0]["run"] == "auto"
    assert "throughput" in capsys.readouterr().out


def test_missing_profile(tmp_path, capsys):
    missing = tmp_path / "nope" / "profile.json"
    p = write_config(tmp_path, missing)
    assert main(["run", "-c", str(p)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["run", "-c", str(tmp_path / "absent.toml")]) == 2
    assert "absent.toml" in capsys.readouterr().err


def test_unknown_key(tmp_path, root, capsys):
    p = write_config(tmp_path, root / "profiles" / "v100_dual_epyc.json", extra="colour = 3")
    assert main(["run", "-c", str(p)]) == 2
    assert "colour" in capsys.readouterr().err


def test_metrics_byte_identical(cfg_path, tmp_path):
    main(["run", "-c", str(cfg_path), "--out", str(tmp_path / "a")])
    main(["run", "-c", str(cfg_path), "--out", str(tmp_path / "b")])
    for name in ("metrics.json", "events.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_identical_strategies(cfg_path, tmp_path):
    rows = compare(load_config(cfg_path), [Override.AUTO, Override.AUTO])
    assert [r["throughput_delta"] for r in rows] == [0.0, 0.0]
    assert [r["latency_delta"] for r in rows] == [0.0, 0.0]


def test_compare_needs_two(cfg_path):
    with pytest.raises(ConfigError):
        compare(load_config(cfg_path), [Override.AUTO])


def test_compare_async_beats_asymmetric_when_host_is_slow(tmp_path, host_only_profile):
    p = write_config(tmp_path, host_only_profile, workload="num_requests = 12\nprompt_len = 200\noutput_len = 40\n")
    rows = compare(load_config(p), [Override.ASYNC, Override.ASYMMETRIC])
    assert rows[0]["throughput"] > rows[1]["throughput"]
    assert (tmp_path / "out" / "async" / "metrics.json").exists()
    assert (tmp_path / "out" / "asymmetric" / "metrics.json").exists()


def test_compare_cli_table(cfg_path, tmp_path, capsys):
    assert main(["compare", "-c", str(cfg_path), "--strategies", "auto,gpu-only"]) == 0
    out = capsys.readouterr().out
    assert "throughput_delta" in out and "gpu_only" in out
    assert (tmp_path / "out" / "compare.csv").exists()


def test_precedence(cfg_path):
    text = cfg_path.read_text().replace("[workload]", "seed = 3\nmax_batch_tokens = 100\n[workload]")
    cfg_path.write_text(text)
    assert load_config(cfg_path, env={}).seed == 3
    env = {"HYBRIDSIM_SEED": "5", "HYBRIDSIM_MAX_BATCH_TOKENS": "77"}
    cfg = load_config(cfg_path, env=env)
    assert (cfg.seed, cfg.max_batch_tokens, cfg.workload.seed) == (5, 77, 5)
    cfg = load_config(cfg_path, env=env, overrides={"seed": 9})
    assert (cfg.seed, cfg.max_batch_tokens) == (9, 77)


def test_env_override_changes_run(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("HYBRIDSIM_STRATEGY", "gpu-only")
    main(["run", "-c", str(cfg_path)])
    rows = list(csv.DictReader(open(tmp_path / "out" / "metrics.csv")))
    assert rows[0]["run"] == "gpu_only"


def test_defaults_only_five_lines(tmp_path, root):
    p = tmp_path / "five.toml"
    p.write_text(f'profile = "{root / "profiles" / "a10_xeon.json"}"\n[workload]\nnum_requests = 3\n'
                 'prompt_len = 10\noutput_len = 4\n')
    cfg = load_config(p)
    assert cfg.min_cpu_gpu_ratio == 8.0 and cfg.activation_reserve_fraction == 0.10


def test_relative_profile_path(tmp_path, root):
    (tmp_path / "profiles").mkdir()
    (tmp_path / "profiles" / "x.json").write_text((root / "profiles" / "a10_xeon.json").read_text())
    p = write_config(tmp_path, "profiles/x.json")
    assert load_config(p).profile_path == str(tmp_path / "profiles" / "x.json")


@pytest.mark.parametrize("bad", ['min_cpu_gpu_ratio = 0', 'activation_reserve_fraction = 1.5', 'strategy = "fast"'])
def test_invalid_knobs(tmp_path, root, bad):
    p = write_config(tmp_path, root / "profiles" / "v100_dual_epyc.json", extra=bad)
    assert main(["run", "-c", str(p)]) == 2


def test_sweep_single_value(cfg_path):
    rows = sweep(load_config(cfg_path), "output_len", [8])
    assert len(rows) == 1 and rows[0]["output_len"] == 8
    assert rows[0]["relative_throughput"] > 0


def test_sweep_parallel_keeps_axis_order(cfg_path):
    cfg = load_config(cfg_path)
    serial = sweep(cfg, "max_batch_tokens", [512, 64, 256])
    parallel = sweep(cfg, "max_batch_tokens", [512, 64, 256], jobs=2)
    assert serial == parallel
    assert [r["max_batch_tokens"] for r in parallel] == [512, 64, 256]


def test_sweep_cli(cfg_path, tmp_path, capsys):
    assert main(["sweep", "-c", str(cfg_path), "--axis", "cpu_scale", "--values", "1,2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "sweep.csv")))
    assert [r["cpu_scale"] for r in rows] == ["1", "2"]


def test_sweep_unknown_axis(cfg_path):
    with pytest.raises(ConfigError):
        sweep(load_config(cfg_path), "colour", [1])


def test_module_entry(cfg_path, tmp_path):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "hybridsim", "run", "-c", str(cfg_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
