"""Per-iteration strategy selection for hybrid CPU-GPU decoding.

The scheduler picks one of three execution strategies each iteration:
GPU-only, asymmetric pipelining (two sub-batches, CPU attention of one
overlaps GPU work of the other) or asynchronous overlap (one unified
batch, CPU attention results consumed one iteration later).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .cost_model import (
    DomainError,
    HardwareProfile,
    attention_rates,
    gpu_attention_time,
    linear_time,
    pipelining_threshold,
)


class SchedulingError(RuntimeError):
    """Inconsistent snapshot or partition request."""


class Strategy(str, Enum):
    GPU_ONLY = "gpu_only"
    ASYMMETRIC = "asymmetric_pipelining"
    ASYNC_OVERLAP = "async_overlap"


class Override(str, Enum):
    AUTO = "auto"
    GPU_ONLY = "gpu_only"
    ASYMMETRIC = "asymmetric"
    ASYNC = "async"

    @classmethod
    def parse(cls, text: str) -> "Override":
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "auto": cls.AUTO,
            "gpu_only": cls.GPU_ONLY, "gpuonly": cls.GPU_ONLY, "gpuonlyforce": cls.GPU_ONLY, "gpu": cls.GPU_ONLY,
            "asymmetric": cls.ASYMMETRIC, "asymmetricforce": cls.ASYMMETRIC, "asym": cls.ASYMMETRIC,
            "async": cls.ASYNC, "asyncforce": cls.ASYNC, "async_overlap": cls.ASYNC,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown strategy {text!r}; expected one of auto, gpu_only, asymmetric, async") from None


@dataclass(frozen=True)
class Entry:
    """One request as seen by the scheduler.

    `tokens` is what the request adds to a linear-op batch (its prompt chunk
    during prefill, 1 during decode); `kv_tokens` is the context attended over.
    """

    id: str
    tokens: int = 1
    kv_tokens: int = 1
    layers_completed: int = 0
    order: int = 0
    syncing: bool = False  # consuming a deferred CPU result this iteration


@dataclass(frozen=True)
class QueueSnapshot:
    prefill: tuple[Entry, ...] = ()
    gpu_decode: tuple[Entry, ...] = ()
    cpu_decode: tuple[Entry, ...] = ()

    def check(self):
        seen = set()
        for e in (*self.prefill, *self.gpu_decode, *self.cpu_decode):
            if e.id in seen:
                raise SchedulingError(f"request {e.id} appears in more than one queue")
            seen.add(e.id)


@dataclass(frozen=True)
class InequalityInputs:
    n_g: float
    n_c: float
    t_glinear: float
    t_gatt: float
    t_glinear_pref: float | None = None
    t_gatt_pref: float | None = None


@dataclass(frozen=True)
class Verdict:
    holds: bool
    lhs: float
    rhs: float

    def __bool__(self):
        return self.holds


@dataclass(frozen=True)
class SchedulerConfig:
    min_cpu_gpu_ratio: float = 8.0
    max_batch_tokens: int = 2048
    override: Override = Override.AUTO


@dataclass(frozen=True)
class StrategyDecision:
    kind: Strategy
    prefill: tuple[str, ...] = ()
    gpu_set: tuple[str, ...] = ()
    cpu_set: tuple[str, ...] = ()
    sub_batch_1: tuple[str, ...] = ()
    sub_batch_2: tuple[str, ...] = ()
    deferred: tuple[str, ...] = ()
    rationale: dict = field(default_factory=dict)


def _check(inputs: InequalityInputs, mixed: bool):
    durs = [inputs.t_glinear, inputs.t_gatt]
    if mixed:
        if inputs.t_glinear_pref is None or inputs.t_gatt_pref is None:
            raise DomainError("mixed inequality needs the prefill timings")
        durs += [inputs.t_glinear_pref, inputs.t_gatt_pref]
    if not all(d > 0 for d in durs):
        raise DomainError("durations must be positive")
    if not (inputs.n_g > 0 and inputs.n_c >= 0):
        raise DomainError("rates must be positive")


def decode_only_beneficial(inputs: InequalityInputs) -> Verdict:
    """Throughput of decode-only asymmetric pipelining vs GPU-only, strict comparison."""
    _check(inputs, mixed=False)
    ng, nc, tl, ta = inputs.n_g, inputs.n_c, inputs.t_glinear, inputs.t_gatt
    cycle = 2 * tl + ta
    lhs = (ng * ta + nc * cycle) / cycle
    rhs = ng * ta / (tl + ta)
    return Verdict(lhs > rhs, lhs, rhs)


def mixed_beneficial(inputs: InequalityInputs) -> Verdict:
    """Same comparison with a CPU window stretched by the prefill sub-batch.

    The denominator on the left keeps the decode-only cycle time.
    """
    _check(inputs, mixed=True)
    ng, nc, tl, ta = inputs.n_g, inputs.n_c, inputs.t_glinear, inputs.t_gatt
    window = inputs.t_glinear_pref + tl + inputs.t_gatt_pref
    lhs = (ng * ta + nc * window) / (2 * tl + ta)
    rhs = ng * ta / (tl + ta)
    return Verdict(lhs > rhs, lhs, rhs)


def ratio_gate(num_cpu: int, num_gpu: int, min_ratio: float = 8.0) -> bool:
    """CPU attention only pays for its runtime overhead with enough CPU requests."""
    if min_ratio <= 0:
        raise ValueError("min_ratio must be positive")
    return num_cpu >= 1 and num_cpu >= min_ratio * num_gpu


def _pipeline_order(entries):
    # most layers already done first: they add the least extra linear time
    return sorted(entries, key=lambda e: (-e.layers_completed, e.order))


def partition_asymmetric(snapshot: QueueSnapshot, capacity_1: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split a snapshot into the mixed sub-batch and the CPU-only sub-batch.

    Prefill and GPU decode always go to sub-batch 1. CPU decode requests fill
    its remaining token room; if they do not all fit, the ones with the most
    layers already completed are moved to sub-batch 2 first.
    """
    cpu = [e for e in snapshot.cpu_decode if not e.syncing]
    base = [e.id for e in snapshot.prefill] + [e.id for e in snapshot.gpu_decode]
    used = sum(e.tokens for e in snapshot.prefill) + sum(e.tokens for e in snapshot.gpu_decode)
    if used > capacity_1:
        raise SchedulingError(f"sub-batch 1 capacity {capacity_1} below its mandatory {used} tokens")
    room = capacity_1 - used
    if len(cpu) <= room:
        return tuple(base + [e.id for e in sorted(cpu, key=lambda e: e.order)]), ()
    ordered = _pipeline_order(cpu)
    n2 = len(ordered) - room
    sub2 = [e.id for e in ordered[:n2]]
    stay = sorted(ordered[n2:], key=lambda e: e.order)
    return tuple(base + [e.id for e in stay]), tuple(sub2)


def _op_point(entries) -> tuple[int, int]:
    return len(entries), sum(e.kv_tokens for e in entries)


def inequality_inputs(snapshot: QueueSnapshot, profile: HardwareProfile) -> InequalityInputs:
    """Profile lookups feeding both inequalities.

    Rates are taken at the CPU queue's operating point; the GPU timings at the
    GPU decode batch (or the CPU queue's point when no GPU decode exists).
    """
    cpu = [e for e in snapshot.cpu_decode] or list(snapshot.gpu_decode)
    gpu = list(snapshot.gpu_decode) or cpu
    rates = (1.0, 1.0)
    if cpu:
        rates = attention_rates(profile, *_op_point(cpu))
    t_l = t_a = 1.0
    if gpu:
        b, kv = _op_point(gpu)
        t_l = linear_time(profile, b)
        t_a = gpu_attention_time(profile, b, kv)
    t_lp = t_ap = None
    if snapshot.prefill:
        ptok, pkv = sum(e.tokens for e in snapshot.prefill), sum(e.kv_tokens for e in snapshot.prefill)
        t_lp = linear_time(profile, ptok + len(snapshot.gpu_decode))
        t_ap = gpu_attention_time(profile, ptok, max(pkv, ptok))
        if snapshot.gpu_decode:
            t_ap += t_a
    return InequalityInputs(rates[0], rates[1], t_l, t_a, t_lp, t_ap)


def _select_for_pipeline(cpu, budget_kv: float, num_layers: int):
    """CPU requests whose attention fits in the CPU's share of one pipeline cycle."""
    chosen, spent = [], 0.0
    for e in _pipeline_order([e for e in cpu if not e.syncing]):
        cost = e.kv_tokens * (num_layers - e.layers_completed) / num_layers
        if chosen and spent + cost > budget_kv:
            break
        chosen.append(e)
        spent += cost
    return chosen


def decide(snapshot: QueueSnapshot, profile: HardwareProfile, config: SchedulerConfig = SchedulerConfig()) -> StrategyDecision:
    snapshot.check()
    pre = tuple(e.id for e in snapshot.prefill)
    gpu = tuple(e.id for e in snapshot.gpu_decode)
    cpu = tuple(e.id for e in snapshot.cpu_decode)
    ins = inequality_inputs(snapshot, profile) if (snapshot.gpu_decode or snapshot.cpu_decode) else None
    why: dict = {"num_prefill": len(pre), "num_gpu": len(gpu), "num_cpu": len(cpu)}
    if ins is not None:
        why.update(n_g=ins.n_g, n_c=ins.n_c, t_glinear=ins.t_glinear, t_gatt=ins.t_gatt)

    def gpu_only(reason):
        return StrategyDecision(Strategy.GPU_ONLY, prefill=pre, gpu_set=gpu, deferred=cpu, rationale={**why, "reason": reason})

    if not cpu:
        return gpu_only("no_cpu_requests")
    ov = config.override
    if ov is Override.GPU_ONLY:
        return gpu_only("forced")
    if ov is Override.AUTO and not ratio_gate(len(cpu), len(gpu), config.min_cpu_gpu_ratio):
        return gpu_only("ratio_gate")

    if snapshot.prefill:
        verdict = mixed_beneficial(ins)
        window = ins.t_glinear_pref + ins.t_glinear + ins.t_gatt_pref
        why.update(t_glinear_pref=ins.t_glinear_pref, t_gatt_pref=ins.t_gatt_pref)
    else:
        verdict = decode_only_beneficial(ins)
        window = 2 * ins.t_glinear + ins.t_gatt
    why.update(mode="mixed" if snapshot.prefill else "decode_only", lhs=verdict.lhs, rhs=verdict.rhs,
               threshold=pipelining_threshold(ins.t_glinear, ins.t_gatt))

    if ov is Override.ASYNC or (ov is Override.AUTO and not verdict.holds):
        why["reason"] = "forced" if ov is Override.ASYNC else "inequality_false"
        return StrategyDecision(Strategy.ASYNC_OVERLAP, prefill=pre, gpu_set=gpu, cpu_set=cpu, rationale=why)

    why["reason"] = "forced" if ov is Override.ASYMMETRIC else "inequality_true"
    selected = _select_for_pipeline(snapshot.cpu_decode, ins.n_c * window, profile.num_layers)
    sel_ids = {e.id for e in selected}
    trimmed = QueueSnapshot(snapshot.prefill, snapshot.gpu_decode, tuple(selected))
    mandatory = sum(e.tokens for e in snapshot.prefill) + len(gpu)
    sub1, sub2 = partition_asymmetric(trimmed, max(config.max_batch_tokens, mandatory))
    why["cpu_budget_kv"] = ins.n_c * window
    deferred = tuple(i for i in cpu if i not in sel_ids)
    return StrategyDecision(
        Strategy.ASYMMETRIC, prefill=pre, gpu_set=gpu, sub_batch_1=sub1, sub_batch_2=sub2,
        deferred=deferred, rationale=why,
    )
