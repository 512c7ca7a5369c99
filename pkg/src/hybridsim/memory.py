"""KV-cache capacity accounting and GPU-first admission."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .cost_model import HardwareProfile


class Device(str, Enum):
    GPU = "gpu"
    CPU = "cpu"


class AccountingError(RuntimeError):
    """Misuse of the KV account (unknown or double-released request)."""


@dataclass(frozen=True)
class PlacementDecision:
    request_id: str
    device: Device


@dataclass(frozen=True)
class Rejection:
    request_id: str
    footprint: int
    reason: str


@dataclass
class AdmissionOutcome:
    placements: list[PlacementDecision] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)
    waiting: list = field(default_factory=list)


@dataclass
class KvAccount:
    gpu_capacity_tokens: int
    cpu_capacity_tokens: int
    gpu_used_tokens: int = 0
    cpu_used_tokens: int = 0
    reservations: dict[str, tuple[Device, int]] = field(default_factory=dict)

    @classmethod
    def from_profile(
        cls,
        profile: HardwareProfile,
        activation_reserve_fraction: float = 0.10,
        cpu_offload: bool = True,
    ) -> "KvAccount":
        if not 0 <= activation_reserve_fraction < 1:
            raise ValueError("activation_reserve_fraction must be in [0, 1)")
        free = profile.gpu_mem_bytes * (1 - activation_reserve_fraction) - profile.weights_bytes
        gpu = max(0, int(free // profile.kv_bytes_per_token))
        cpu = int(profile.cpu_mem_bytes // profile.kv_bytes_per_token) if cpu_offload else 0
        return cls(gpu_capacity_tokens=gpu, cpu_capacity_tokens=cpu)

    def free(self, device: Device) -> int:
        if device is Device.GPU:
            return self.gpu_capacity_tokens - self.gpu_used_tokens
        return self.cpu_capacity_tokens - self.cpu_used_tokens

    def capacity(self, device: Device) -> int:
        return self.gpu_capacity_tokens if device is Device.GPU else self.cpu_capacity_tokens

    def _charge(self, device: Device, tokens: int):
        if device is Device.GPU:
            self.gpu_used_tokens += tokens
        else:
            self.cpu_used_tokens += tokens

    def reserve(self, request_id: str, device: Device, tokens: int):
        if request_id in self.reservations:
            raise AccountingError(f"request {request_id} already placed")
        if tokens > self.free(device):
            raise AccountingError(f"request {request_id} does not fit on {device.value}")
        self.reservations[request_id] = (device, tokens)
        self._charge(device, tokens)

    def device_of(self, request_id: str) -> Device:
        return self.reservations[request_id][0]


def kv_tokens_needed(request) -> int:
    """Reserve-ahead footprint: one KV slot per prompt and per output token."""
    return request.prompt_len + request.output_len


def admit(account: KvAccount, new_requests: Iterable) -> AdmissionOutcome:
    """Place FCFS-ordered requests, GPU first.

    The GPU takes the longest FCFS prefix that fits; from the first request
    that does not fit onward, requests go to the CPU while it has room. The
    first request that fits nowhere stops admission and it and everything
    after it stay waiting. A request larger than a device's total capacity
    can never go there; one too large for both is rejected.
    """
    out = AdmissionOutcome()
    device = Device.GPU
    reqs = list(new_requests)
    for n, req in enumerate(reqs):
        need = kv_tokens_needed(req)
        if need > account.gpu_capacity_tokens and need > account.cpu_capacity_tokens:
            out.rejected.append(Rejection(req.id, need, "exceeds_capacity"))
            continue
        if device is Device.GPU and need > account.free(Device.GPU):
            device = Device.CPU
        if need > account.free(device):
            out.waiting = [r for r in reqs[n:] if not _too_big(account, r)]
            out.rejected.extend(
                Rejection(r.id, kv_tokens_needed(r), "exceeds_capacity") for r in reqs[n + 1:] if _too_big(account, r)
            )
            break
        account.reserve(req.id, device, need)
        out.placements.append(PlacementDecision(req.id, device))
    return out


def _too_big(account: KvAccount, req) -> bool:
    need = kv_tokens_needed(req)
    return need > account.gpu_capacity_tokens and need > account.cpu_capacity_tokens


def release(account: KvAccount, request_id: str) -> KvAccount:
    try:
        device, tokens = account.reservations.pop(request_id)
    except KeyError:
        raise AccountingError(f"release of unknown or already released request {request_id}") from None
    account._charge(device, -tokens)
    if account.gpu_used_tokens < 0 or account.cpu_used_tokens < 0:
        raise AccountingError("used tokens went negative")
    return account


def migrate(account: KvAccount, request_id: str, to: Device) -> bool:
    """Move a reservation to another device if it fits there. Returns True on success."""
    try:
        device, tokens = account.reservations[request_id]
    except KeyError:
        raise AccountingError(f"unknown request {request_id}") from None
    if device is to or tokens > account.free(to):
        return False
    account._charge(device, -tokens)
    account._charge(to, tokens)
    account.reservations[request_id] = (to, tokens)
    return True
