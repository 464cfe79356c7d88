"""GPU sharing policies: exclusive access, time multiplexing, and the two
spatial multiplexing variants.

Each policy turns ready kernels into timed :class:`DispatchEvent` records.
Virtual time is an integer tick count (see :data:`TICKS_PER_SECOND`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .cost_model import (
    DeviceSpec,
    GemmShape,
    OutOfMemory,
    SharingMode,
    batch_inputs,
    kernel_cost,
    memory_footprint,
)

TICKS_PER_SECOND = 10**15


def to_ticks(seconds: float) -> int:
    return round(seconds * TICKS_PER_SECOND)


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


class PolicyKind(str, Enum):
    EXCLUSIVE = "exclusive"
    TIME_MUX = "time-mux"
    SPACE_IMPLICIT = "space-implicit"
    SPACE_EXPLICIT = "space-explicit"
    SPACE_TIME = "space-time"

    @property
    def memory_mode(self) -> SharingMode:
        if self in (PolicyKind.SPACE_EXPLICIT, PolicyKind.SPACE_TIME):
            return SharingMode.SHARED_CONTEXT
        return SharingMode.PROCESS_PER_TENANT

    @property
    def label(self) -> str:
        """Coarse family name used in speedup tables."""
        if self is PolicyKind.TIME_MUX:
            return "time-only"
        if self in (PolicyKind.SPACE_IMPLICIT, PolicyKind.SPACE_EXPLICIT):
            return "space-only"
        return self.value

    @classmethod
    def parse(cls, value: "str | PolicyKind") -> "PolicyKind":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown policy {value!r}; expected one of: {names}") from None


@dataclass(frozen=True)
class PolicyParams:
    quantum: float = 5e-3
    batch_size: int = 1
    fairness_gap_even: float = 0.1
    fairness_gap_odd: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not self.quantum > 0:
            raise ValueError("quantum must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.fairness_gap_even <= self.fairness_gap_odd:
            raise ValueError("need 0 <= fairness_gap_even <= fairness_gap_odd")


@dataclass(frozen=True)
class ReadyKernel:
    request_id: int
    tenant_id: int
    shape: GemmShape
    pass_id: int = 0


@dataclass(frozen=True)
class DispatchEvent:
    start: int
    end: int
    launches: int
    member_requests: tuple[int, ...]
    policy: PolicyKind
    occupancy: float
    context_switches: int = 0
    flops: int = 0
    member_tenants: tuple[int, ...] = ()
    completions: tuple[int, ...] = ()

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("event must have end > start")
        if self.launches < 1 or not self.member_requests:
            raise ValueError("event needs >= 1 launch and >= 1 member")
        if not 0 < self.occupancy <= 1:
            raise ValueError(f"occupancy {self.occupancy} outside (0, 1]")

    def to_json(self) -> dict:
        return {
            "type": "dispatch",
            "policy": self.policy.value,
            "start": self.start,
            "end": self.end,
            "launches": self.launches,
            "members": list(self.member_requests),
            "tenants": list(self.member_tenants),
            "completions": list(self.completions),
            "occupancy": self.occupancy,
            "context_switches": self.context_switches,
            "flops": self.flops,
        }


def check_memory(kind: PolicyKind, tenants: Sequence, device: DeviceSpec,
                 mode: SharingMode | None = None) -> float:
    """Footprint for ``kind`` (or an explicit ``mode``); raises
    :class:`OutOfMemory` when it does not fit."""
    mode = kind.memory_mode if mode is None else SharingMode(mode)
    need = memory_footprint(tenants, mode, device)
    if need > device.mem_capacity:
        raise OutOfMemory(mode, need, device.mem_capacity)
    return need


def exclusive_round(tenant, params: PolicyParams, device: DeviceSpec, start: int = 0,
                    request_id: int = 0) -> DispatchEvent:
    """One batched forward pass of ``tenant``: a launch per layer, whole device."""
    costs = [kernel_cost(batch_inputs(s, params.batch_size), device) for s in tenant.layers]
    ticks = sum(to_ticks(c.duration) for c in costs)
    busy = sum(c.duration * c.occupancy for c in costs) / sum(c.duration for c in costs)
    end = start + ticks
    return DispatchEvent(
        start=start,
        end=end,
        launches=len(costs),
        member_requests=(request_id,),
        policy=PolicyKind.EXCLUSIVE,
        occupancy=busy,
        flops=sum(c.flops for c in costs),
        member_tenants=(tenant.tenant_id,),
        completions=(end,),
    )


def check_exclusive(tenants: Sequence) -> None:
    if len(tenants) != 1:
        raise ValueError("exclusive requires single tenant")


@dataclass
class TimeMuxState:
    """Round-robin cursor. A turn keeps running the current tenant's passes
    that were already in flight when the turn began, until the quantum runs out."""

    last_tenant: int | None = None
    turn_start: int = 0
    turn_passes: frozenset = field(default_factory=frozenset)


def time_mux_step(ready: Mapping[int, Sequence[ReadyKernel]], params: PolicyParams,
                  device: DeviceSpec, state: TimeMuxState, now: int) -> DispatchEvent | None:
    """Pick and time the next kernel. ``ready`` maps tenant id to its ready
    kernels in FIFO order. Returns ``None`` when nothing is ready."""
    tenants = sorted(t for t, ks in ready.items() if ks)
    if not tenants:
        return None
    cur = state.last_tenant
    pick = None
    if cur is not None and now - state.turn_start < to_ticks(params.quantum):
        for k in ready.get(cur, ()):
            if k.pass_id in state.turn_passes:
                pick = k
                break
    switches = 0
    if pick is None:
        after = [t for t in tenants if cur is None or t > cur]
        nxt = after[0] if after else tenants[0]
        if cur is not None and nxt != cur:
            switches = 1
        state.last_tenant = nxt
        state.turn_start = now
        state.turn_passes = frozenset(k.pass_id for k in ready[nxt])
        pick = ready[nxt][0]
    cost = kernel_cost(pick.shape, device)
    kernel_ticks = to_ticks(cost.duration)
    total = switches * to_ticks(device.context_switch_overhead) + kernel_ticks
    end = now + total
    return DispatchEvent(
        start=now,
        end=end,
        launches=1,
        member_requests=(pick.request_id,),
        policy=PolicyKind.TIME_MUX,
        occupancy=cost.occupancy * kernel_ticks / total,
        context_switches=switches,
        flops=cost.flops,
        member_tenants=(pick.tenant_id,),
        completions=(end,),
    )


def time_mux_round(ready: Sequence[ReadyKernel], params: PolicyParams, device: DeviceSpec,
                   state: TimeMuxState, now: int = 0) -> list[DispatchEvent]:
    """Run every kernel in ``ready`` once, serially, in round-robin order."""
    pending: dict[int, list[ReadyKernel]] = {}
    for k in ready:
        pending.setdefault(k.tenant_id, []).append(k)
    events = []
    while any(pending.values()):
        ev = time_mux_step(pending, params, device, state, now)
        done = ev.member_requests[0]
        for ks in pending.values():
            ks[:] = [k for k in ks if k.request_id != done]
        events.append(ev)
        now = ev.end
    return events


def _space_round(kind: PolicyKind, ready: Sequence[ReadyKernel], params: PolicyParams,
                 device: DeviceSpec, rng: np.random.Generator, now: int, gap: float) -> list[DispatchEvent]:
    n = len(ready)
    if n == 0:
        return []
    slots = device.slot_total
    budget = max(1, slots // n)
    groups = -(-n // slots)
    costs = [kernel_cost(k.shape, device, budget) for k in ready]
    serial = n * device.launch_overhead * device.launch_serialization
    base = device.space_sched_penalty * (serial + groups * max(c.duration for c in costs))
    jitter = rng.random(n) * gap
    done = tuple(now + to_ticks(base * (1.0 + j)) for j in jitter)
    end = max(done)
    return [
        DispatchEvent(
            start=now,
            end=end,
            launches=1,
            member_requests=(k.request_id,),
            policy=kind,
            occupancy=min(1.0, c.blocks / (c.waves * slots) * groups),
            flops=c.flops,
            member_tenants=(k.tenant_id,),
            completions=(t,),
        )
        for k, c, t in zip(ready, costs, done)
    ]


def space_implicit_round(ready: Sequence[ReadyKernel], params: PolicyParams, device: DeviceSpec,
                         rng: np.random.Generator, now: int = 0) -> list[DispatchEvent]:
    """Device-arbitrated concurrent streams, one process per tenant.

    Slots are split evenly over the ``n`` ready kernels; the round pays a
    serialized share of every launch and the scheduling penalty; each
    completion is stretched by a uniform jitter whose ceiling is larger for
    odd ``n``.
    """
    n = len(ready)
    gap = params.fairness_gap_odd if n % 2 else params.fairness_gap_even
    return _space_round(PolicyKind.SPACE_IMPLICIT, ready, params, device, rng, now, gap)


def space_explicit_round(ready: Sequence[ReadyKernel], params: PolicyParams, device: DeviceSpec,
                         rng: np.random.Generator, now: int = 0) -> list[DispatchEvent]:
    """Streams multiplexed inside one process: same cost structure as the
    implicit variant, shared-context memory, no odd-count anomaly."""
    return _space_round(PolicyKind.SPACE_EXPLICIT, ready, params, device, rng, now,
                        params.fairness_gap_even)
