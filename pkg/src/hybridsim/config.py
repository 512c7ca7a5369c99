"""Run configuration: TOML file, environment overrides, command-line flags.

Precedence, lowest to highest: built-in defaults, config file, ``HYBRIDSIM_*``
environment variables, explicit flags. Relative paths in a config file are
resolved against the file's directory.

A minimal config::

    profile = "profiles/v100_dual_epyc.json"
    [workload]
    num_requests = 50
    output_len = {dist = "constant", value = 200}
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .engine import EngineConfig
from .scheduler import Override, SchedulerConfig
from .workload import Constant, Fixed, LogNormal, Poisson, Trace, Uniform, WorkloadSpec

ENV_PREFIX = "HYBRIDSIM_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile_path: str = "profiles/v100_dual_epyc.json"
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    strategy_override: Override = Override.AUTO
    min_cpu_gpu_ratio: float = 8.0
    max_batch_tokens: int = 2048
    activation_reserve_fraction: float = 0.10
    seed: int = 0
    output_dir: str = "out"
    prefill_chunk_tokens: int | None = None
    hidden_size: int = 4096
    dtype_bytes: int = 2
    sync_overhead_us: float = 0.0
    max_iterations: int | None = None

    def __post_init__(self):
        if not self.min_cpu_gpu_ratio > 0:
            raise ConfigError("min_cpu_gpu_ratio must be > 0")
        if self.max_batch_tokens < 1:
            raise ConfigError("max_batch_tokens must be >= 1")
        if not 0 <= self.activation_reserve_fraction < 1:
            raise ConfigError("activation_reserve_fraction must be in [0, 1)")
        if self.prefill_chunk_tokens is not None and self.prefill_chunk_tokens < 1:
            raise ConfigError("prefill_chunk_tokens must be >= 1")
        if self.hidden_size < 1 or self.dtype_bytes < 1:
            raise ConfigError("hidden_size and dtype_bytes must be >= 1")
        if self.sync_overhead_us < 0:
            raise ConfigError("sync_overhead_us must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            scheduler=SchedulerConfig(self.min_cpu_gpu_ratio, self.max_batch_tokens, self.strategy_override),
            activation_reserve_fraction=self.activation_reserve_fraction,
            prefill_chunk_tokens=self.prefill_chunk_tokens,
            hidden_size=self.hidden_size,
            dtype_bytes=self.dtype_bytes,
            sync_overhead_us=self.sync_overhead_us,
            max_iterations=self.max_iterations,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# scalar knobs settable from the file's top level, the environment and flags
_SCALARS = {
    "profile": ("profile_path", str),
    "strategy": ("strategy_override", Override.parse),
    "min_cpu_gpu_ratio": ("min_cpu_gpu_ratio", float),
    "max_batch_tokens": ("max_batch_tokens", int),
    "activation_reserve_fraction": ("activation_reserve_fraction", float),
    "seed": ("seed", int),
    "output_dir": ("output_dir", str),
    "prefill_chunk_tokens": ("prefill_chunk_tokens", int),
    "hidden_size": ("hidden_size", int),
    "dtype_bytes": ("dtype_bytes", int),
    "sync_overhead_us": ("sync_overhead_us", float),
    "max_iterations": ("max_iterations", int),
}


def parse_length_dist(obj, what: str):
    if isinstance(obj, int):
        return Constant(obj)
    if not isinstance(obj, dict):
        raise ConfigError(f"{what}: expected an integer or a table with 'dist'")
    kind = str(obj.get("dist", "constant")).lower()
    try:
        if kind == "constant":
            return Constant(int(obj["value"]))
        if kind == "uniform":
            return Uniform(int(obj["lo"]), int(obj["hi"]))
        if kind == "lognormal":
            if "mean" in obj:
                return LogNormal.from_mean(float(obj["mean"]), float(obj.get("sigma", 0.5)))
            return LogNormal(float(obj["mu"]), float(obj["sigma"]))
    except KeyError as exc:
        raise ConfigError(f"{what}: missing field {exc}") from None
    raise ConfigError(f"{what}: unknown distribution {kind!r}")


def parse_workload(obj: dict, base: Path, seed: int) -> WorkloadSpec:
    known = {"trace", "arrival", "interval_us", "rate_per_s", "num_requests", "prompt_len", "output_len"}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"workload: unknown keys {sorted(extra)}")
    if "trace" in obj:
        arrival = Trace(str(_resolve(obj["trace"], base)))
    else:
        kind = str(obj.get("arrival", "fixed")).lower()
        if kind == "fixed":
            arrival = Fixed(float(obj.get("interval_us", 0.0)))
        elif kind == "poisson":
            if "rate_per_s" not in obj:
                raise ConfigError("workload: poisson arrivals need rate_per_s")
            arrival = Poisson(float(obj["rate_per_s"]))
        else:
            raise ConfigError(f"workload: unknown arrival process {kind!r}")
    try:
        return WorkloadSpec(
            arrival_process=arrival,
            prompt_len_dist=parse_length_dist(obj.get("prompt_len", 1000), "workload.prompt_len"),
            output_len_dist=parse_length_dist(obj.get("output_len", 256), "workload.output_len"),
            num_requests=int(obj.get("num_requests", 100)),
            seed=seed,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"workload: {exc}") from None


def _resolve(p, base: Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _coerce(key, raw):
    attr, conv = _SCALARS[key]
    if raw is None or (isinstance(raw, str) and raw.lower() in ("", "none")):
        if attr in ("prefill_chunk_tokens", "max_iterations"):
            return attr, None
    try:
        return attr, conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def load_config(path: str | Path | None = None, env=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a TOML file, the environment and flag overrides."""
    env = os.environ if env is None else env
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    values: dict = {}
    for key, raw in doc.items():
        if key in ("workload", "engine"):
            continue
        if key not in _SCALARS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, val = _coerce(key, raw)
        values[attr] = val
    for key, raw in doc.get("engine", {}).items():
        if key not in _SCALARS:
            raise ConfigError(f"unknown engine key {key!r}")
        attr, val = _coerce(key, raw)
        values[attr] = val
    if "profile_path" in values:
        values["profile_path"] = str(_resolve(values["profile_path"], base))
    for key in _SCALARS:
        name = ENV_PREFIX + key.upper()
        if name in env:
            attr, val = _coerce(key, env[name])
            values[attr] = val
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        attr, val = _coerce(key, raw)
        values[attr] = val
    seed = values.get("seed", 0)
    values["workload"] = parse_workload(doc.get("workload", {}), base, seed)
    return RunConfig(**values)
