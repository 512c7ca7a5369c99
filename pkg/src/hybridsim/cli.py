"""Command-line entry point: ``hybridsim run | compare | sweep``."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .cost_model import HardwareProfile, ProfileError, load_profile
from .engine import RunResult, run
from .report import metrics_json, write_events, write_metrics_csv
from .scheduler import Override
from .workload import Constant, LogNormal, TraceError, Uniform, synthesize

log = logging.getLogger("hybridsim")

SWEEP_AXES = (
    "output_len", "prompt_len", "cpu_scale", "gpu_mem_bytes",
    "min_cpu_gpu_ratio", "max_batch_tokens", "num_requests",
)


def simulate(cfg: RunConfig, profile: HardwareProfile | None = None) -> RunResult:
    profile = profile or load_profile(cfg.profile_path)
    return run(synthesize(cfg.workload), profile, cfg.engine_config())


def write_artifacts(res: RunResult, out: Path, label: str = "run") -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_events(res.events, out / "events.jsonl")
    (out / "metrics.json").write_text(metrics_json(res.metrics))
    write_metrics_csv([{"run": label, **res.metrics.flat()}], out / "metrics.csv")


def run_once(cfg: RunConfig) -> RunResult:
    res = simulate(cfg)
    write_artifacts(res, Path(cfg.output_dir), cfg.strategy_override.value)
    return res


def compare(cfg: RunConfig, strategies: list[Override]) -> list[dict]:
    """Same workload instance under each strategy; deltas relative to the first."""
    if len(strategies) < 2:
        raise ConfigError("compare needs at least two strategies")
    profile = load_profile(cfg.profile_path)
    reqs = synthesize(cfg.workload)
    rows = []
    for ov in strategies:
        sub = cfg.replace(strategy_override=ov)
        res = run(reqs, profile, sub.engine_config())
        write_artifacts(res, Path(cfg.output_dir) / ov.value, ov.value)
        rows.append({
            "strategy": ov.value,
            "throughput": res.metrics.throughput,
            "avg_per_token_latency": res.metrics.avg_per_token_latency,
        })
    base = rows[0]
    for row in rows:
        row["throughput_delta"] = _rel(row["throughput"], base["throughput"])
        row["latency_delta"] = _rel(row["avg_per_token_latency"], base["avg_per_token_latency"])
    return rows


def _rel(x, base):
    return x / base - 1.0 if base else 0.0


def _scale_dist(dist, mean):
    mean = int(round(mean))
    if isinstance(dist, Constant):
        return Constant(mean)
    if isinstance(dist, Uniform):
        half = (dist.hi - dist.lo) / 2 * mean / max(dist.mean, 1)
        return Uniform(max(1, int(round(mean - half))), int(round(mean + half)))
    if isinstance(dist, LogNormal):
        return LogNormal.from_mean(mean, dist.sigma)
    raise ConfigError(f"cannot rescale {dist!r}")


def apply_axis(cfg: RunConfig, profile: HardwareProfile, axis: str, value: float):
    """Return (config, profile) with one knob set to `value`."""
    w = cfg.workload
    if axis == "output_len":
        cfg = cfg.replace(workload=_replace(w, output_len_dist=_scale_dist(w.output_len_dist, value)))
    elif axis == "prompt_len":
        cfg = cfg.replace(workload=_replace(w, prompt_len_dist=_scale_dist(w.prompt_len_dist, value)))
    elif axis == "num_requests":
        cfg = cfg.replace(workload=_replace(w, num_requests=int(value)))
    elif axis == "cpu_scale":
        profile = profile.scaled(cpu_speed=value)
    elif axis == "gpu_mem_bytes":
        profile = profile.scaled(gpu_mem_bytes=value)
    elif axis == "min_cpu_gpu_ratio":
        cfg = cfg.replace(min_cpu_gpu_ratio=value)
    elif axis == "max_batch_tokens":
        cfg = cfg.replace(max_batch_tokens=int(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    return cfg, profile


def _replace(spec, **kw):
    import dataclasses

    return dataclasses.replace(spec, **kw)


def sweep_point(cfg: RunConfig, profile: HardwareProfile, axis: str, value: float) -> dict:
    """One sweep row: the configured strategy normalized to forced GPU-only."""
    cfg, profile = apply_axis(cfg, profile, axis, value)
    reqs = synthesize(cfg.workload)
    res = run(reqs, profile, cfg.engine_config())
    base = run(reqs, profile, cfg.replace(strategy_override=Override.GPU_ONLY).engine_config())
    m = res.metrics
    return {
        axis: value,
        "throughput": m.throughput,
        "gpu_only_throughput": base.metrics.throughput,
        "relative_throughput": m.throughput / base.metrics.throughput if base.metrics.throughput else 0.0,
        "b": m.decode_intensive_fraction,
        "a": m.gpu_cpu_power_ratio,
        "speedup_estimate": m.speedup_estimate,
    }


def _sweep_job(args):
    return sweep_point(*args)


def sweep(cfg: RunConfig, axis: str, values: list[float], jobs: int = 1) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    profile = load_profile(cfg.profile_path)
    tasks = [(cfg, profile, axis, v) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, tasks))  # map keeps axis order
    return [_sweep_job(t) for t in tasks]


def _fmt_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _number(text: str) -> float:
    v = float(text)
    return int(v) if v.is_integer() else v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="TOML run configuration")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="workload seed (overrides seed)")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="hybridsim", description="Hybrid CPU-GPU LLM inference simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="simulate one configuration")
    r.add_argument("--strategy", help="auto, gpu-only, asymmetric or async")
    c = sub.add_parser("compare", parents=[common], help="same workload under several strategies")
    c.add_argument("--strategies", default="auto,gpu-only", help="comma-separated strategy list")
    s = sub.add_parser("sweep", parents=[common], help="vary one knob, normalized to GPU-only")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--strategy", help="strategy compared against GPU-only (default: from config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    flags = {"output_dir": args.out, "seed": args.seed, "strategy": getattr(args, "strategy", None)}
    try:
        cfg = load_config(args.config, overrides=flags)
        if args.command == "run":
            res = run_once(cfg)
            m = res.metrics
            print(f"throughput {m.throughput:.2f} tok/s  avg latency {m.avg_per_token_latency:.1f} us/token  "
                  f"iterations {m.iterations}  rejected {m.rejected_count}")
            print(f"artifacts written to {cfg.output_dir}")
        elif args.command == "compare":
            strategies = [Override.parse(s) for s in args.strategies.split(",") if s.strip()]
            rows = compare(cfg, strategies)
            write_metrics_csv(rows, Path(cfg.output_dir) / "compare.csv")
            print(_fmt_table(rows))
        else:
            values = [_number(v) for v in args.values.split(",") if v.strip()]
            rows = sweep(cfg, args.axis, values, args.jobs)
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
            write_metrics_csv(rows, Path(cfg.output_dir) / "sweep.csv")
            print(_fmt_table(rows))
    except (ConfigError, ProfileError, TraceError) as exc:
        print(f"hybridsim: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"hybridsim: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
