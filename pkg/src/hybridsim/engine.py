"""Discrete-event execution of scheduler decisions.

Time advances one iteration at a time. Every iteration the engine admits
arrivals, checks which outstanding CPU attention dispatches have finished,
asks the scheduler for a strategy and charges the matching step cost.

CPU attention is modelled as one FIFO server. Under the overlap strategy a
dispatch issued at the start of iteration k is consumed by the first
iteration that starts after it finishes; its token is emitted at the end of
that consuming iteration. The GPU never waits for the CPU.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .cost_model import (
    HardwareProfile,
    cpu_attention_time,
    gpu_attention_time,
    linear_time,
)
from .memory import Device, KvAccount, admit, release
from .scheduler import (
    Entry,
    Override,
    QueueSnapshot,
    SchedulerConfig,
    Strategy,
    StrategyDecision,
    decide,
)
from .workload import Phase, Request

log = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class EngineConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    activation_reserve_fraction: float = 0.10
    prefill_chunk_tokens: int | None = None  # None: whole prompt in one iteration
    hidden_size: int = 4096
    dtype_bytes: int = 2
    sync_overhead_us: float = 0.0
    max_iterations: int | None = None

    @property
    def payload_bytes_per_token(self) -> int:
        # q, k, v go down to the host, the attention output comes back
        return 4 * self.hidden_size * self.dtype_bytes


@dataclass(frozen=True)
class IterationOutcome:
    duration: float
    tokens_emitted_gpu: int
    tokens_emitted_cpu: int
    gpu_busy: float
    cpu_busy: float
    transfer_time: float
    strategy: Strategy
    bubble: float = 0.0


@dataclass(frozen=True)
class GpuWork:
    """What the GPU runs in one iteration apart from any CPU-offloaded rows.

    prefill: (already_prefilled, chunk, prompt_len, offload_to_host) per request.
    decode_kv: context lengths of GPU-attended decode rows.
    synced_rows: CPU rows whose deferred attention result is consumed now; they
    need a linear row and emit a token.
    """

    prefill: tuple[tuple[int, int, int, bool], ...] = ()
    decode_kv: tuple[int, ...] = ()
    synced_rows: int = 0

    @property
    def prefill_tokens(self) -> int:
        return sum(c for _, c, _, _ in self.prefill)

    @property
    def first_tokens(self) -> int:
        return sum(1 for off, c, p, _ in self.prefill if off + c >= p)


def transfer_time(num_tokens: int, profile: HardwareProfile, payload_bytes_per_token: float = 32768) -> float:
    """PCIe time to move one layer's per-token activations for `num_tokens` rows."""
    return profile.pcie_latency + num_tokens * payload_bytes_per_token / profile.pcie_bandwidth * 1e6


def kv_offload_time(num_tokens: int, profile: HardwareProfile) -> float:
    """Moving freshly prefilled KV to host memory.

    It streams layer by layer while the GPU keeps computing, so steps charge
    it as a parallel lane: the iteration lasts max(compute, offload).
    """
    return profile.pcie_latency + num_tokens * profile.kv_bytes_per_token / profile.pcie_bandwidth * 1e6


def _lin(profile, n):
    return linear_time(profile, n) if n > 0 else 0.0


def _gatt(profile, kvs):
    return gpu_attention_time(profile, len(kvs), sum(kvs)) if kvs else 0.0


def _catt(profile, kvs):
    return cpu_attention_time(profile, len(kvs), sum(kvs)) if kvs else 0.0


def _prefill_att(profile, work: GpuWork):
    if not work.prefill:
        return 0.0
    toks = work.prefill_tokens
    return gpu_attention_time(profile, toks, sum(off + c for off, c, _, _ in work.prefill))


def _offload(profile, work: GpuWork):
    n = sum(c for _, c, _, off in work.prefill if off)
    return kv_offload_time(n, profile) if n else 0.0


def step_gpu_only(work: GpuWork, profile: HardwareProfile) -> IterationOutcome:
    L = profile.num_layers
    rows = work.prefill_tokens + len(work.decode_kv) + work.synced_rows
    per_layer = _lin(profile, rows) + _gatt(profile, work.decode_kv) + _prefill_att(profile, work)
    xfer = _offload(profile, work)
    busy = L * per_layer + profile.per_iteration_overhead
    return IterationOutcome(
        duration=max(busy, xfer),
        tokens_emitted_gpu=len(work.decode_kv) + work.first_tokens,
        tokens_emitted_cpu=work.synced_rows,
        gpu_busy=busy,
        cpu_busy=0.0,
        transfer_time=xfer,
        strategy=Strategy.GPU_ONLY,
    )


def step_async_overlap(
    work: GpuWork,
    dispatch_kv: tuple[int, ...],
    fresh_rows: int,
    profile: HardwareProfile,
    config: EngineConfig = EngineConfig(),
) -> IterationOutcome:
    """One unified batch: CPU rows share the single linear op per layer.

    `dispatch_kv` are the contexts of rows whose attention is sent to the CPU
    this iteration; `fresh_rows` of them are not already counted in
    `work.synced_rows`. cpu_busy is the dispatched CPU work (attention plus
    per-layer transfers), which may extend past this iteration.
    """
    L = profile.num_layers
    rows = work.prefill_tokens + len(work.decode_kv) + work.synced_rows + fresh_rows
    per_layer = _lin(profile, rows) + _gatt(profile, work.decode_kv) + _prefill_att(profile, work)
    xfer_gpu = _offload(profile, work)
    busy = L * per_layer + config.sync_overhead_us + profile.per_iteration_overhead
    dur = max(busy, xfer_gpu)
    cpu_work = 0.0
    xfer_cpu = 0.0
    if dispatch_kv:
        xfer_cpu = L * transfer_time(len(dispatch_kv), profile, config.payload_bytes_per_token)
        cpu_work = L * _catt(profile, dispatch_kv) + xfer_cpu
    return IterationOutcome(
        duration=dur,
        tokens_emitted_gpu=len(work.decode_kv) + work.first_tokens,
        tokens_emitted_cpu=work.synced_rows,
        gpu_busy=busy,
        cpu_busy=cpu_work,
        transfer_time=xfer_gpu + xfer_cpu,
        strategy=Strategy.ASYNC_OVERLAP,
    )


def step_asymmetric(
    work: GpuWork,
    sub1_cpu: tuple[tuple[int, int], ...],
    sub2_cpu: tuple[tuple[int, int], ...],
    profile: HardwareProfile,
    config: EngineConfig = EngineConfig(),
) -> IterationOutcome:
    """Two sub-batches, each paying its own linear op in every layer.

    CPU rows are (kv_tokens, layers_completed); a row only runs the layers it
    has not finished yet. An empty sub-batch still costs one single-token
    linear pass per layer.
    """
    L = profile.num_layers
    base = work.prefill_tokens + len(work.decode_kv) + work.synced_rows
    g_att = _gatt(profile, work.decode_kv) + _prefill_att(profile, work)
    gpu_lane = 0.0
    cpu_lane = 0.0
    xfer = 0.0
    for j in range(1, L + 1):
        live1 = [kv for kv, done in sub1_cpu if done < j]
        live2 = [kv for kv, done in sub2_cpu if done < j]
        gpu_lane += linear_time(profile, max(1, base + len(live1))) + g_att
        gpu_lane += linear_time(profile, max(1, len(live2)))
        live = live1 + live2
        if live:
            x = transfer_time(len(live), profile, config.payload_bytes_per_token)
            cpu_lane += _catt(profile, live) + x
            xfer += x
    off = _offload(profile, work)
    gpu_lane += profile.per_iteration_overhead
    dur = max(gpu_lane, cpu_lane, off)
    return IterationOutcome(
        duration=dur,
        tokens_emitted_gpu=len(work.decode_kv) + work.first_tokens,
        tokens_emitted_cpu=work.synced_rows + len(sub1_cpu) + len(sub2_cpu),
        gpu_busy=gpu_lane,
        cpu_busy=cpu_lane,
        transfer_time=xfer + off,
        strategy=Strategy.ASYMMETRIC,
        bubble=dur - gpu_lane,
    )


# --- run loop --------------------------------------------------------------


@dataclass
class Dispatch:
    """A group of CPU attention rows sent together; the server works on it FIFO."""

    members: set
    work: float
    ready_at: float

    def layers_done(self, t: float, num_layers: int) -> int:
        remaining = min(self.work, max(0.0, self.ready_at - t))
        done = (self.work - remaining) / (self.work / num_layers)
        return min(max(int(math.floor(done + _EPS)), 0), num_layers - 1)


@dataclass
class RunResult:
    events: list
    outcomes: list
    requests: list
    metrics: object = None


def _r(x):
    return round(float(x), 6)


def _clean(obj):
    if isinstance(obj, float):
        return _r(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "value"):
        return obj.value
    return obj


class Simulator:
    def __init__(self, requests, profile: HardwareProfile, config: EngineConfig = EngineConfig()):
        self.profile = profile
        self.config = config
        self.requests = sorted((r.fresh_copy() for r in requests), key=lambda r: r.arrival_time)
        self.order = {r.id: n for n, r in enumerate(self.requests)}
        self.by_id = {r.id: r for r in self.requests}
        forced_gpu = config.scheduler.override is Override.GPU_ONLY
        self.account = KvAccount.from_profile(
            profile, config.activation_reserve_fraction, cpu_offload=not forced_gpu
        )
        self.t = 0.0
        self.iteration = 0
        self.events: list[dict] = []
        self.outcomes: list[IterationOutcome] = []
        self.pending = list(self.requests)  # not yet arrived
        self.waiting: list[Request] = []
        self.active: list[Request] = []
        self.inflight: dict[str, Dispatch] = {}
        self.cpu_free_at = 0.0

    def emit(self, t, kind, request_id=None, strategy=None, **detail):
        ev = {"t_us": _r(t), "kind": kind}
        if strategy is not None:
            ev["strategy"] = strategy.value
        if request_id is not None:
            ev["request_id"] = request_id
        ev["detail"] = _clean(detail)
        self.events.append(ev)

    # -- bookkeeping ---------------------------------------------------------

    def _ingest(self):
        while self.pending and self.pending[0].arrival_time <= self.t + _EPS:
            r = self.pending.pop(0)
            self.emit(r.arrival_time, "arrival", r.id, prompt_len=r.prompt_len, output_len=r.output_len)
            self.waiting.append(r)
        if not self.waiting:
            return
        out = admit(self.account, self.waiting)
        for rej in out.rejected:
            self.emit(self.t, "reject", rej.request_id, footprint=rej.footprint, reason=rej.reason)
        for p in out.placements:
            r = self.by_id[p.request_id]
            r.placement = p.device
            r.advance(Phase.PREFILL)
            self.active.append(r)
            self.emit(self.t, "admit", r.id, device=p.device.value)
        self.waiting = list(out.waiting)

    def _synced(self) -> set:
        done = set()
        for rid, d in self.inflight.items():
            if d.ready_at <= self.t + _EPS:
                done.add(rid)
        for rid in sorted(done, key=self.order.get):
            self.emit(self.t, "sync", rid)
            del self.inflight[rid]
        return done

    def _snapshot(self, synced: set):
        L = self.profile.num_layers
        budget = self.config.scheduler.max_batch_tokens
        chunk_cap = self.config.prefill_chunk_tokens
        pre, gdec, cdec = [], [], []
        pre_plan = []
        gpu_rows = sum(1 for r in self.active if r.phase is Phase.DECODE and r.placement is Device.GPU)
        room = budget - gpu_rows
        blocked = False  # strict FCFS: once a prompt does not fit, later ones wait too
        for r in self.active:
            o = self.order[r.id]
            if r.phase is Phase.PREFILL:
                if blocked:
                    continue
                left = r.prompt_len - r.prefilled
                chunk = left if chunk_cap is None else min(left, chunk_cap)
                if pre and chunk > room:
                    blocked = True
                    continue
                room -= chunk
                pre.append(Entry(r.id, chunk, r.prefilled + chunk, 0, o))
                pre_plan.append((r, chunk))
            elif r.placement is Device.GPU:
                gdec.append(Entry(r.id, 1, r.context_len, 0, o))
            else:
                d = self.inflight.get(r.id)
                lc = d.layers_done(self.t, L) if d is not None else 0
                cdec.append(Entry(r.id, 1, r.context_len, lc, o, syncing=r.id in synced))
        return QueueSnapshot(tuple(pre), tuple(gdec), tuple(cdec)), pre_plan

    def _has_gpu_work(self, snap: QueueSnapshot) -> bool:
        if snap.prefill or snap.gpu_decode:
            return True
        return any(e.syncing or e.id not in self.inflight for e in snap.cpu_decode)

    # -- main loop -------------------------------------------------------------

    def run(self) -> RunResult:
        L = self.profile.num_layers
        cap = self.config.max_iterations
        while True:
            if cap is not None and self.iteration >= cap:
                break
            if not self.active and not self.waiting and self.pending:
                self.t = max(self.t, self.pending[0].arrival_time)
            self._ingest()
            synced = self._synced()
            snap, pre_plan = self._snapshot(synced)
            if not self._has_gpu_work(snap):
                nxt = [d.ready_at for d in self.inflight.values()]
                if self.pending:
                    nxt.append(self.pending[0].arrival_time)
                if not nxt:
                    if self.active or self.waiting:
                        log.warning("simulation stalled with %d active, %d waiting requests",
                                    len(self.active), len(self.waiting))
                    break
                self.t = max(self.t, min(nxt))
                continue
            dec = decide(snap, self.profile, self.config.scheduler)
            self._execute(dec, snap, pre_plan, synced, L)
        self.events.sort(key=lambda e: e["t_us"])
        return RunResult(self.events, self.outcomes, self.requests)

    def _execute(self, dec: StrategyDecision, snap: QueueSnapshot, pre_plan, synced: set, L: int):
        t0 = self.t
        k = self.iteration
        self.emit(t0, "decide", strategy=dec.kind, iteration=k, **dec.rationale)
        prefill = tuple(
            (r.prefilled, c, r.prompt_len, r.placement is Device.CPU) for r, c in pre_plan
        )
        gpu_dec = [e for e in snap.gpu_decode]
        cpu = {e.id: e for e in snap.cpu_decode}
        work = GpuWork(prefill, tuple(e.kv_tokens for e in gpu_dec), len(synced))
        emitted_cpu = sorted(synced, key=self.order.get)
        dispatched: dict = {}

        if dec.kind is Strategy.GPU_ONLY:
            out = step_gpu_only(work, self.profile)
        elif dec.kind is Strategy.ASYNC_OVERLAP:
            fresh = [e for e in snap.cpu_decode if not e.syncing and e.id not in self.inflight]
            again = [e for e in snap.cpu_decode if e.syncing and self.by_id[e.id].remaining > 1]
            rows = sorted(fresh + again, key=lambda e: e.order)
            # a re-dispatched row attends over the token it emits this iteration
            kvs = tuple(e.kv_tokens + (1 if e.syncing else 0) for e in rows)
            out = step_async_overlap(work, kvs, len(fresh), self.profile, self.config)
            if rows:
                start = max(t0, self.cpu_free_at)
                d = Dispatch({e.id for e in rows}, out.cpu_busy, start + out.cpu_busy)
                self.cpu_free_at = d.ready_at
                for e in rows:
                    self.inflight[e.id] = d
                dispatched = {"dispatched": [e.id for e in rows], "dispatch_start": start,
                              "ready_at": d.ready_at}
        else:
            chosen = set(dec.sub_batch_1) | set(dec.sub_batch_2)
            for rid in sorted(chosen & set(self.inflight), key=self.order.get):
                self.inflight.pop(rid).members.discard(rid)
            s1 = tuple((cpu[i].kv_tokens, cpu[i].layers_completed) for i in dec.sub_batch_1 if i in cpu)
            s2 = tuple((cpu[i].kv_tokens, cpu[i].layers_completed) for i in dec.sub_batch_2)
            out = step_asymmetric(work, s1, s2, self.profile, self.config)
            # the pipeline pre-empts the CPU server; queued dispatches slide back
            lane = out.cpu_busy
            if lane > 0:
                for d in {id(d): d for d in self.inflight.values()}.values():
                    if d.ready_at > t0 + _EPS:
                        d.ready_at += lane
                self.cpu_free_at = (self.cpu_free_at if self.cpu_free_at > t0 else t0) + lane
            emitted_cpu = sorted(synced | {i for i in chosen if i in cpu}, key=self.order.get)

        if out.duration <= 0:
            raise RuntimeError("iteration with non-positive duration")
        self.emit(
            t0, "iteration_start", strategy=dec.kind, iteration=k, duration=out.duration,
            gpu_busy=out.gpu_busy, cpu_busy=out.cpu_busy, transfer=out.transfer_time,
            bubble=out.bubble, tokens_gpu=out.tokens_emitted_gpu, tokens_cpu=out.tokens_emitted_cpu,
            prefill_tokens=work.prefill_tokens, rows=work.prefill_tokens + len(gpu_dec) + len(synced),
            **dispatched,
        )
        self.t = t1 = t0 + out.duration
        self.iteration += 1
        self.outcomes.append(out)

        # emissions at the end of the iteration
        for r, c in pre_plan:
            r.prefilled += c
            if r.prefilled >= r.prompt_len:
                r.advance(Phase.DECODE)
                self._token(r, t1, Device.GPU, k)
        for e in gpu_dec:
            self._token(self.by_id[e.id], t1, Device.GPU, k)
        for rid in emitted_cpu:
            self._token(self.by_id[rid], t1, Device.CPU, k)

    def _token(self, r: Request, t: float, device: Device, k: int):
        r.tokens_generated += 1
        self.emit(t, "token_emit", r.id, device=device.value, index=r.tokens_generated, iteration=k)
        if r.tokens_generated >= r.output_len:
            r.advance(Phase.DONE)
            self.active.remove(r)
            self.inflight.pop(r.id, None)
            release(self.account, r.id)
            self.emit(t, "complete", r.id, arrival_us=r.arrival_time, output_len=r.output_len)


def run(requests, profile: HardwareProfile, config: EngineConfig = EngineConfig()) -> RunResult:
    """Simulate `requests` to completion (or `config.max_iterations`)."""
    from .report import summarize

    res = Simulator(requests, profile, config).run()
    res.metrics = summarize(res.events)
    return res
