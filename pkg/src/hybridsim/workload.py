"""Request streams: canonical JSON-lines traces and seeded synthetic workloads."""
from __future__ import annotations

import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from .memory import Device

log = logging.getLogger(__name__)


class TraceError(ValueError):
    pass


class Phase(str, Enum):
    QUEUED = "queued"
    PREFILL = "prefill"
    DECODE = "decode"
    DONE = "done"


_PHASE_ORDER = {Phase.QUEUED: 0, Phase.PREFILL: 1, Phase.DECODE: 2, Phase.DONE: 3}


@dataclass
class Request:
    id: str
    arrival_time: float  # us
    prompt_len: int
    output_len: int
    # runtime state, owned by the engine
    tokens_generated: int = 0
    phase: Phase = Phase.QUEUED
    placement: Device | None = None
    layers_completed: int = 0
    prefilled: int = 0

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ValueError(f"request {self.id}: prompt_len and output_len must be >= 1")

    def advance(self, phase: Phase):
        if _PHASE_ORDER[phase] < _PHASE_ORDER[self.phase]:
            raise ValueError(f"request {self.id}: illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase

    @property
    def context_len(self) -> int:
        return self.prompt_len + self.tokens_generated

    @property
    def remaining(self) -> int:
        return self.output_len - self.tokens_generated

    def fresh_copy(self) -> "Request":
        return Request(self.id, self.arrival_time, self.prompt_len, self.output_len)


# --- length distributions -------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, self.value, dtype=np.int64)

    @property
    def mean(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    def sample(self, rng, n):
        return rng.integers(self.lo, self.hi + 1, size=n)

    @property
    def mean(self):
        return (self.lo + self.hi) / 2


@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float

    @classmethod
    def from_mean(cls, mean: float, sigma: float = 0.5) -> "LogNormal":
        return cls(math.log(mean) - sigma * sigma / 2, sigma)

    def sample(self, rng, n):
        return np.maximum(1, np.rint(rng.lognormal(self.mu, self.sigma, size=n))).astype(np.int64)

    @property
    def mean(self):
        return math.exp(self.mu + self.sigma**2 / 2)


LengthDist = Union[Constant, Uniform, LogNormal]


@dataclass(frozen=True)
class Poisson:
    rate_per_s: float


@dataclass(frozen=True)
class Fixed:
    interval_us: float


@dataclass(frozen=True)
class Trace:
    path: str


@dataclass(frozen=True)
class WorkloadSpec:
    arrival_process: Poisson | Fixed | Trace = field(default_factory=lambda: Fixed(0.0))
    prompt_len_dist: LengthDist = field(default_factory=lambda: Constant(1000))
    output_len_dist: LengthDist = field(default_factory=lambda: Constant(256))
    num_requests: int = 100
    seed: int = 0

    def __post_init__(self):
        for d in (self.prompt_len_dist, self.output_len_dist):
            if isinstance(d, Constant) and d.value < 1:
                raise ValueError("Constant length must be >= 1")
            if isinstance(d, Uniform) and not 1 <= d.lo <= d.hi:
                raise ValueError("Uniform needs 1 <= lo <= hi")
            if isinstance(d, LogNormal) and d.sigma < 0:
                raise ValueError("LogNormal sigma must be >= 0")
        if self.num_requests < 0:
            raise ValueError("num_requests must be >= 0")


def synthesize(spec: WorkloadSpec) -> list[Request]:
    if isinstance(spec.arrival_process, Trace):
        return load_trace(spec.arrival_process.path)
    rng = np.random.default_rng(spec.seed)
    n = spec.num_requests
    if isinstance(spec.arrival_process, Poisson):
        if spec.arrival_process.rate_per_s <= 0:
            raise ValueError("Poisson rate must be positive")
        gaps = rng.exponential(1e6 / spec.arrival_process.rate_per_s, size=n)
        arrivals = np.cumsum(gaps) - (gaps[0] if n else 0.0)
    else:
        arrivals = np.arange(n, dtype=float) * spec.arrival_process.interval_us
    prompts = spec.prompt_len_dist.sample(rng, n)
    outputs = spec.output_len_dist.sample(rng, n)
    return [
        Request(f"r{i:05d}", float(arrivals[i]), int(prompts[i]), int(outputs[i]))
        for i in range(n)
    ]


# --- traces ---------------------------------------------------------------


def count_inversions(values) -> int:
    """Number of pairs i < j with values[i] > values[j] (merge-sort count)."""
    vals = list(values)

    def sort(xs):
        if len(xs) <= 1:
            return xs, 0
        mid = len(xs) // 2
        left, a = sort(xs[:mid])
        right, b = sort(xs[mid:])
        merged, inv, i, j = [], a + b, 0, 0
        while i < len(left) and j < len(right):
            if right[j] < left[i]:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
            else:
                merged.append(left[i])
                i += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv

    return sort(vals)[1]


def _open(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path)


def read_trace(path: str | Path) -> tuple[list[Request], int]:
    """Parse a JSON-lines trace. Returns arrival-sorted requests and the inversion count."""
    path = Path(path)
    reqs: list[Request] = []
    ids: set[str] = set()
    try:
        fh = _open(path)
    except OSError as exc:
        raise TraceError(f"cannot open trace {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
                t = float(obj["arrival_time_us"])
                p, o = obj["prompt_len"], obj["output_len"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TraceError(f"{where}: malformed trace line ({exc})") from None
            if not (isinstance(p, int) and isinstance(o, int)) or p < 1 or o < 1:
                raise TraceError(f"{where}: prompt_len and output_len must be integers >= 1")
            if not math.isfinite(t) or t < 0:
                raise TraceError(f"{where}: arrival_time_us must be a finite non-negative number")
            rid = str(obj.get("id", f"r{len(reqs):05d}"))
            if rid in ids:
                raise TraceError(f"{where}: duplicate id {rid!r}")
            ids.add(rid)
            reqs.append(Request(rid, t, p, o))
    inversions = count_inversions([r.arrival_time for r in reqs])
    if inversions:
        log.warning("%s: %d out-of-order timestamp pairs; sorting", path, inversions)
        reqs.sort(key=lambda r: r.arrival_time)
    return reqs, inversions


def load_trace(path: str | Path) -> list[Request]:
    return read_trace(path)[0]


def write_trace(requests, path: str | Path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt") as fh:
        for r in requests:
            fh.write(json.dumps({"id": r.id, "arrival_time_us": r.arrival_time,
                                 "prompt_len": r.prompt_len, "output_len": r.output_len}) + "\n")
