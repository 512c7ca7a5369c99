"""Profiling-table cost model.

Every latency in a profile is per transformer layer and in microseconds.
Whole-iteration costs are assembled by the engine.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ProfileError(ValueError):
    """Raised for malformed or inconsistent profile documents."""


class DomainError(ValueError):
    """Raised when a formula is evaluated outside its domain."""


@dataclass(frozen=True)
class ProfilePoint:
    token_count: int
    latency: float
    kv_tokens: int | None = None


@dataclass(frozen=True)
class HardwareProfile:
    linear_table: tuple[ProfilePoint, ...]
    gpu_attn_table: tuple[ProfilePoint, ...]
    cpu_attn_table: tuple[ProfilePoint, ...]
    num_layers: int
    gpu_mem_bytes: float
    cpu_mem_bytes: float
    pcie_bandwidth: float  # bytes / second
    pcie_latency: float  # us
    kv_bytes_per_token: float
    weights_bytes: float
    per_iteration_overhead: float = 0.0  # us

    _linear: tuple = field(init=False, repr=False, compare=False)
    _gpu_grid: tuple = field(init=False, repr=False, compare=False)
    _cpu_grid: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("linear_table", "gpu_attn_table", "cpu_attn_table"):
            if not getattr(self, name):
                raise ProfileError(f"{name} is empty")
        if self.num_layers < 1:
            raise ProfileError("num_layers must be >= 1")
        for name in ("gpu_mem_bytes", "cpu_mem_bytes", "pcie_bandwidth", "kv_bytes_per_token"):
            if not getattr(self, name) > 0:
                raise ProfileError(f"{name} must be positive")
        if self.weights_bytes < 0 or self.pcie_latency < 0 or self.per_iteration_overhead < 0:
            raise ProfileError("weights_bytes, pcie_latency and per_iteration_overhead must be non-negative")

        pts = sorted(self.linear_table, key=lambda p: p.token_count)
        xs = np.array([p.token_count for p in pts], dtype=float)
        ys = np.array([p.latency for p in pts], dtype=float)
        if np.any(np.diff(xs) == 0):
            raise ProfileError("linear_table has duplicate token counts")
        if np.any(np.diff(ys) < 0):
            raise ProfileError("linear_table latencies must be non-decreasing in token count")
        object.__setattr__(self, "_linear", (xs, ys))
        object.__setattr__(self, "_gpu_grid", _build_grid(self.gpu_attn_table, "gpu_attn_table"))
        object.__setattr__(self, "_cpu_grid", _build_grid(self.cpu_attn_table, "cpu_attn_table"))

    def scaled(self, *, cpu_speed: float = 1.0, gpu_mem_bytes: float | None = None) -> "HardwareProfile":
        """Copy with CPU attention `cpu_speed` times faster and/or a new GPU memory size."""
        if cpu_speed <= 0:
            raise DomainError("cpu_speed must be positive")
        cpu = tuple(
            ProfilePoint(p.token_count, p.latency / cpu_speed, p.kv_tokens) for p in self.cpu_attn_table
        )
        return HardwareProfile(
            linear_table=self.linear_table,
            gpu_attn_table=self.gpu_attn_table,
            cpu_attn_table=cpu,
            num_layers=self.num_layers,
            gpu_mem_bytes=self.gpu_mem_bytes if gpu_mem_bytes is None else gpu_mem_bytes,
            cpu_mem_bytes=self.cpu_mem_bytes,
            pcie_bandwidth=self.pcie_bandwidth,
            pcie_latency=self.pcie_latency,
            kv_bytes_per_token=self.kv_bytes_per_token,
            weights_bytes=self.weights_bytes,
            per_iteration_overhead=self.per_iteration_overhead,
        )

    def to_dict(self) -> dict:
        def attn(table):
            return [{"tokens": p.token_count, "kv_tokens": p.kv_tokens, "latency_us": p.latency} for p in table]

        return {
            "num_layers": self.num_layers,
            "gpu_mem_bytes": self.gpu_mem_bytes,
            "cpu_mem_bytes": self.cpu_mem_bytes,
            "pcie_bandwidth_bytes_per_s": self.pcie_bandwidth,
            "pcie_latency_us": self.pcie_latency,
            "kv_bytes_per_token": self.kv_bytes_per_token,
            "weights_bytes": self.weights_bytes,
            "per_iteration_overhead_us": self.per_iteration_overhead,
            "linear": [{"tokens": p.token_count, "latency_us": p.latency} for p in self.linear_table],
            "gpu_attn": attn(self.gpu_attn_table),
            "cpu_attn": attn(self.cpu_attn_table),
        }


def _build_grid(table, name):
    batches = sorted({p.token_count for p in table})
    kvs = sorted({p.kv_tokens for p in table})
    if None in kvs:
        raise ProfileError(f"{name}: every point needs kv_tokens")
    lat = np.full((len(batches), len(kvs)), np.nan)
    bi = {b: i for i, b in enumerate(batches)}
    ki = {k: j for j, k in enumerate(kvs)}
    for p in table:
        i, j = bi[p.token_count], ki[p.kv_tokens]
        if not np.isnan(lat[i, j]):
            raise ProfileError(f"{name}: duplicate point (tokens={p.token_count}, kv_tokens={p.kv_tokens})")
        lat[i, j] = p.latency
    if np.isnan(lat).any():
        i, j = np.argwhere(np.isnan(lat))[0]
        raise ProfileError(
            f"{name}: table must be a full grid; missing (tokens={batches[i]}, kv_tokens={kvs[j]})"
        )
    return np.array(batches, dtype=float), np.array(kvs, dtype=float), lat


def _bracket(axis: np.ndarray, x: float) -> tuple[int, int, float]:
    # clamp to the endpoints, then locate the enclosing cell
    if x <= axis[0]:
        return 0, 0, 0.0
    if x >= axis[-1]:
        n = len(axis) - 1
        return n, n, 0.0
    hi = int(np.searchsorted(axis, x, side="right"))
    lo = hi - 1
    return lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo])


def _bilinear(grid, batch: float, kv_tokens: float) -> float:
    batches, kvs, lat = grid
    i0, i1, u = _bracket(batches, batch)
    j0, j1, v = _bracket(kvs, kv_tokens)
    top = lat[i0, j0] * (1 - v) + lat[i0, j1] * v
    bot = lat[i1, j0] * (1 - v) + lat[i1, j1] * v
    return float(top * (1 - u) + bot * u)


def linear_time(profile: HardwareProfile, token_count: float) -> float:
    """Per-layer latency of the linear ops (QKV/O projections + FFN) for a batch of tokens."""
    if token_count < 1:
        raise DomainError(f"token_count must be >= 1, got {token_count}")
    xs, ys = profile._linear
    return float(np.interp(token_count, xs, ys))


def gpu_attention_time(profile: HardwareProfile, batch: float, kv_tokens: float) -> float:
    if batch < 1 or kv_tokens < batch:
        raise DomainError(f"need batch >= 1 and kv_tokens >= batch, got {batch}, {kv_tokens}")
    return _bilinear(profile._gpu_grid, batch, kv_tokens)


def cpu_attention_time(profile: HardwareProfile, batch: float, kv_tokens: float) -> float:
    if batch < 1 or kv_tokens < batch:
        raise DomainError(f"need batch >= 1 and kv_tokens >= batch, got {batch}, {kv_tokens}")
    return _bilinear(profile._cpu_grid, batch, kv_tokens)


def attention_rates(profile: HardwareProfile, batch: float, kv_tokens: float) -> tuple[float, float]:
    """GPU and CPU attention throughput (KV tokens per microsecond) at one operating point."""
    return (
        kv_tokens / gpu_attention_time(profile, batch, kv_tokens),
        kv_tokens / cpu_attention_time(profile, batch, kv_tokens),
    )


def pipelining_threshold(t_glinear: float, t_gatt: float) -> float:
    """Largest GPU/CPU attention-rate ratio for which asymmetric pipelining still pays off.

    Equals 2*L/A + 3 + A/L for linear time L and attention time A.
    """
    if not (t_glinear > 0 and t_gatt > 0):
        raise DomainError("t_glinear and t_gatt must both be positive")
    return 2.0 * t_glinear / t_gatt + 3.0 + t_gatt / t_glinear


# --- profile file loading -------------------------------------------------

_REQUIRED = {
    "num_layers": "num_layers",
    "gpu_mem_bytes": "gpu_mem_bytes",
    "cpu_mem_bytes": "cpu_mem_bytes",
    "pcie_bandwidth_bytes_per_s": "pcie_bandwidth",
    "pcie_latency_us": "pcie_latency",
    "kv_bytes_per_token": "kv_bytes_per_token",
    "weights_bytes": "weights_bytes",
    "per_iteration_overhead_us": "per_iteration_overhead",
}


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _array_item_lines(text: str, key: str) -> list[int]:
    """Line numbers of the elements of top-level array `key`; empty if not locatable."""
    m = re.search(r'"%s"\s*:\s*\[' % re.escape(key), text)
    if m is None:
        return []
    dec = json.JSONDecoder()
    idx = m.end()
    lines = []
    ws = re.compile(r"[\s,]*")
    while True:
        idx = ws.match(text, idx).end()
        if idx >= len(text) or text[idx] == "]":
            return lines
        try:
            _, end = dec.raw_decode(text, idx)
        except json.JSONDecodeError:
            return lines
        lines.append(_line_of(text, idx))
        idx = end


def _parse_table(doc: dict, key: str, text: str, source: str, attention: bool) -> tuple[ProfilePoint, ...]:
    items = doc.get(key)
    if not isinstance(items, list) or not items:
        raise ProfileError(f"{source}: '{key}' must be a non-empty array")
    lines = _array_item_lines(text, key)
    seen: dict[tuple, int] = {}
    points = []
    for n, item in enumerate(items):
        line = lines[n] if n < len(lines) else None
        where = f"{source}:{line}" if line else f"{source} ({key}[{n}])"
        if not isinstance(item, dict):
            raise ProfileError(f"{where}: entry must be an object")
        try:
            tokens = item["tokens"]
            latency = float(item["latency_us"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError(f"{where}: entry needs numeric 'tokens' and 'latency_us'") from exc
        kv = item.get("kv_tokens")
        if not isinstance(tokens, int) or tokens < 1:
            raise ProfileError(f"{where}: tokens must be a positive integer")
        if not latency > 0 or math.isinf(latency):
            raise ProfileError(f"{where}: latency_us must be positive")
        if attention:
            if not isinstance(kv, int) or kv < tokens:
                raise ProfileError(f"{where}: kv_tokens must be an integer >= tokens")
            k = (tokens, kv)
        else:
            kv = None
            k = (tokens,)
        if k in seen:
            raise ProfileError(f"{where}: duplicate key {k} in '{key}' (first seen at line {seen[k]})")
        seen[k] = line
        points.append(ProfilePoint(tokens, latency, kv))
    return tuple(points)


def parse_profile(text: str, source: str = "<profile>") -> HardwareProfile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ProfileError(f"{source}: top level must be an object")
    kwargs = {}
    for key, attr in _REQUIRED.items():
        if key not in doc:
            if key == "per_iteration_overhead_us":
                continue
            raise ProfileError(f"{source}: missing key '{key}'")
        val = doc[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ProfileError(f"{source}: '{key}' must be numeric")
        nonneg = key in ("pcie_latency_us", "per_iteration_overhead_us", "weights_bytes")
        if (val < 0) if nonneg else (val <= 0):
            m = re.search(r'"%s"\s*:' % key, text)
            line = _line_of(text, m.start()) if m else "?"
            raise ProfileError(f"{source}:{line}: '{key}' must be {'non-negative' if nonneg else 'positive'}")
        kwargs[attr] = val
    if int(kwargs["num_layers"]) != kwargs["num_layers"]:
        raise ProfileError(f"{source}: 'num_layers' must be an integer")
    kwargs["num_layers"] = int(kwargs["num_layers"])
    try:
        return HardwareProfile(
            linear_table=_parse_table(doc, "linear", text, source, attention=False),
            gpu_attn_table=_parse_table(doc, "gpu_attn", text, source, attention=True),
            cpu_attn_table=_parse_table(doc, "cpu_attn", text, source, attention=True),
            **kwargs,
        )
    except ProfileError as exc:
        if str(exc).startswith(source):
            raise
        raise ProfileError(f"{source}: {exc}") from None


def load_profile(path: str | Path) -> HardwareProfile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProfileError(f"cannot read profile {path}: {exc.strerror}") from exc
    return parse_profile(text, str(path))
