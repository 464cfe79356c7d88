"""Dynamic space-time scheduler.

Pending kernel requests from many tenants are grouped by problem shape and
fused into super-kernels: one launch that runs every member. A group is
released when it reaches the target size, when its oldest member has waited
``max_wait``, or when some member has run out of SLO headroom. Per-tenant
kernel latencies feed an EWMA straggler detector; flagged tenants can be
evicted, which cancels their pending work.
"""

from __future__ import annotations

import dataclasses
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .cost_model import DeviceSpec, GemmShape, KernelCost, dispatch_duration
from .policies import DispatchEvent, PolicyKind, to_seconds, to_ticks

Signature = tuple[tuple[int, int, int, int], ...]


@dataclass(frozen=True)
class KernelRequest:
    request_id: int
    tenant_id: int
    shape: GemmShape
    enqueue_time: int
    slo_deadline: int
    layer_index: int = 0

    def __post_init__(self):
        if self.slo_deadline <= self.enqueue_time:
            raise ValueError("slo_deadline must be after enqueue_time")

    @property
    def order_key(self):
        return (self.enqueue_time, self.tenant_id, self.request_id)


@dataclass(frozen=True)
class BatchPolicy:
    max_wait: float = 1e-3
    target_batch: int = 1024
    allow_variable_size: bool = False
    slo_safety_margin: float = 0.0
    variable_size_inefficiency: float = 1.10

    def __post_init__(self):
        if not self.max_wait > 0:
            raise ValueError("max_wait must be > 0")
        if self.target_batch < 1:
            raise ValueError("target_batch must be >= 1")
        if not 0 <= self.slo_safety_margin < 1:
            raise ValueError("slo_safety_margin must be in [0, 1)")
        if self.variable_size_inefficiency < 1:
            raise ValueError("variable_size_inefficiency must be >= 1")


@dataclass(frozen=True)
class DetectorParams:
    ewma_alpha: float = 0.2
    threshold_ratio: float = 1.5
    min_observations: int = 10
    evict_stragglers: bool = True

    def __post_init__(self):
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        if not self.threshold_ratio > 1:
            raise ValueError("threshold_ratio must be > 1")
        if self.min_observations < 1:
            raise ValueError("min_observations must be >= 1")


def shape_signature(shapes: Iterable[GemmShape]) -> Signature:
    counts: dict[GemmShape, int] = {}
    for s in shapes:
        counts[s] = counts.get(s, 0) + 1
    return tuple((s.m, s.n, s.k, c) for s, c in sorted(counts.items()))


def super_kernel_cost(shapes: Sequence[GemmShape], device: DeviceSpec,
                      policy: BatchPolicy | None = None) -> KernelCost:
    """Planned cost of one fused launch over ``shapes``.

    A single member is issued as a plain GEMM. Several members pay the
    batched-launch setup and run at the batched compute efficiency; mixed
    shapes additionally pay the variable-size inefficiency on the roofline
    term.
    """
    if not shapes:
        raise ValueError("empty dispatch")
    if len(shapes) == 1:
        return dispatch_duration(shapes, device)
    counts: dict[GemmShape, int] = {}
    for s in shapes:
        counts[s] = counts.get(s, 0) + 1
    cost = dispatch_duration(sorted(counts.items()), device, efficiency=device.batched_efficiency)
    roof = cost.duration - device.launch_overhead
    if len(counts) > 1:
        roof *= (policy or BatchPolicy()).variable_size_inefficiency
    return dataclasses.replace(
        cost, duration=device.launch_overhead + device.batch_setup_overhead + roof
    )


@dataclass(frozen=True)
class SuperKernel:
    shape_signature: Signature
    requests: tuple[KernelRequest, ...]
    uniform: bool
    planned_cost: KernelCost

    def __post_init__(self):
        if not self.requests:
            raise ValueError("super-kernel needs members")
        if self.uniform and len({r.shape for r in self.requests}) != 1:
            raise ValueError("uniform super-kernel with mixed shapes")
        if self.planned_cost.launches != 1:
            raise ValueError("super-kernel is a single launch")

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(r.request_id for r in self.requests)


class RequestQueue:
    """Pending requests grouped by shape, FIFO within each group."""

    def __init__(self):
        self._groups: dict[GemmShape, deque[KernelRequest]] = {}
        self._ids: set[int] = set()

    def __len__(self):
        return len(self._ids)

    def __contains__(self, request_id):
        return request_id in self._ids

    def groups(self) -> dict[GemmShape, list[KernelRequest]]:
        return {s: list(q) for s, q in sorted(self._groups.items()) if q}

    def pending(self) -> list[KernelRequest]:
        return sorted((r for q in self._groups.values() for r in q), key=lambda r: r.order_key)

    def add(self, request: KernelRequest) -> None:
        if request.request_id in self._ids:
            raise ValueError(f"duplicate request id {request.request_id}")
        q = self._groups.setdefault(request.shape, deque())
        # keep (enqueue_time, tenant, id) order even if callers interleave
        if q and request.order_key < q[-1].order_key:
            items = sorted([*q, request], key=lambda r: r.order_key)
            q.clear()
            q.extend(items)
        else:
            q.append(request)
        self._ids.add(request.request_id)

    def remove(self, requests: Iterable[KernelRequest]) -> None:
        drop = {r.request_id for r in requests}
        for shape, q in list(self._groups.items()):
            kept = [r for r in q if r.request_id not in drop]
            if len(kept) != len(q):
                self._groups[shape] = deque(kept)
        self._ids -= drop

    def remove_tenant(self, tenant_id: int) -> list[KernelRequest]:
        gone = [r for q in self._groups.values() for r in q if r.tenant_id == tenant_id]
        self.remove(gone)
        return sorted(gone, key=lambda r: r.order_key)


def enqueue(queue: RequestQueue, request: KernelRequest) -> RequestQueue:
    queue.add(request)
    return queue


def slo_headroom(request: KernelRequest, now: int, predicted_duration: float,
                 policy: BatchPolicy) -> float:
    """Seconds left before ``request`` would miss its deadline if launched now."""
    if predicted_duration < 0:
        raise ValueError("predicted_duration must be >= 0")
    # tick arithmetic keeps this consistent with next_trigger
    slack = to_ticks(predicted_duration * (1 + policy.slo_safety_margin))
    return to_seconds(request.slo_deadline - now - slack)


def form_batches(queue: RequestQueue, now: int, policy: BatchPolicy, device: DeviceSpec,
                 target: int | None = None) -> list[SuperKernel]:
    """Release every group that meets the size, age or SLO trigger.

    ``target`` caps ``policy.target_batch`` (the scheduler passes the number of
    requests its live tenants can have outstanding). Members leave oldest
    first; a group at or above target is cut into target-sized super-kernels.
    """
    goal = policy.target_batch if target is None else max(1, min(target, policy.target_batch))
    max_wait = to_ticks(policy.max_wait)
    if policy.allow_variable_size:
        pending = queue.pending()
        groups = [pending] if pending else []
    else:
        groups = list(queue.groups().values())

    out = []
    for group in groups:
        while group:
            if len(group) >= goal:
                take = group[:goal]
            else:
                cost = super_kernel_cost([r.shape for r in group], device, policy)
                aged = now - group[0].enqueue_time >= max_wait
                urgent = any(slo_headroom(r, now, cost.duration, policy) <= 0 for r in group)
                if not (aged or urgent):
                    break
                take = group
            shapes = [r.shape for r in take]
            out.append(SuperKernel(
                shape_signature=shape_signature(shapes),
                requests=tuple(take),
                uniform=len(set(shapes)) == 1,
                planned_cost=super_kernel_cost(shapes, device, policy),
            ))
            group = group[len(take):]
    for sk in out:
        queue.remove(sk.requests)
    return out


def next_trigger(queue: RequestQueue, policy: BatchPolicy, device: DeviceSpec) -> int | None:
    """Earliest tick at which an unreleased group would hit its age or SLO
    trigger, assuming no new arrivals."""
    if policy.allow_variable_size:
        pending = queue.pending()
        groups = [pending] if pending else []
    else:
        groups = list(queue.groups().values())
    best = None
    for group in groups:
        cost = super_kernel_cost([r.shape for r in group], device, policy)
        slack = to_ticks(cost.duration * (1 + policy.slo_safety_margin))
        t = min([group[0].enqueue_time + to_ticks(policy.max_wait)]
                + [r.slo_deadline - slack for r in group])
        best = t if best is None else min(best, t)
    return best


@dataclass
class SuperKernelCache:
    entries: dict[Signature, KernelCost] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def lookup(self, sk: SuperKernel) -> bool:
        if sk.shape_signature in self.entries:
            self.hits += 1
            return True
        self.misses += 1
        self.entries[sk.shape_signature] = sk.planned_cost
        return False

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def dispatch(super_kernel: SuperKernel, cache: SuperKernelCache, device: DeviceSpec,
             start: int = 0) -> tuple[DispatchEvent, SuperKernelCache]:
    hit = cache.lookup(super_kernel)
    duration = super_kernel.planned_cost.duration + (0.0 if hit else device.planning_overhead)
    end = start + to_ticks(duration)
    reqs = super_kernel.requests
    ev = DispatchEvent(
        start=start,
        end=end,
        launches=1,
        member_requests=super_kernel.members,
        policy=PolicyKind.SPACE_TIME,
        occupancy=super_kernel.planned_cost.occupancy,
        flops=super_kernel.planned_cost.flops,
        member_tenants=tuple(r.tenant_id for r in reqs),
        completions=(end,) * len(reqs),
    )
    return ev, cache


@dataclass
class TenantHealth:
    tenant_id: int
    ewma_latency: float = 0.0
    ewma_alpha: float = 0.2
    observed_count: int = 0
    evicted: bool = False


def record_latency(healths: dict[int, TenantHealth], tenant_id: int, observed: float,
                   alpha: float = 0.2) -> dict[int, TenantHealth]:
    if observed < 0:
        raise ValueError("observed latency must be >= 0")
    h = healths.get(tenant_id)
    if h is None:
        h = healths[tenant_id] = TenantHealth(tenant_id, ewma_alpha=alpha)
    if h.observed_count == 0:
        h.ewma_latency = observed
    else:
        h.ewma_latency = h.ewma_alpha * observed + (1 - h.ewma_alpha) * h.ewma_latency
    h.observed_count += 1
    return healths


def detect_stragglers(healths: dict[int, TenantHealth], threshold_ratio: float = 1.5,
                      min_observations: int = 10) -> list[int]:
    """Tenants whose EWMA exceeds ``threshold_ratio`` times the peer median."""
    if not threshold_ratio > 1:
        raise ValueError("threshold_ratio must be > 1")
    live = [h for h in healths.values() if not h.evicted and h.observed_count > 0]
    if len(live) < 2:
        return []
    median = statistics.median(h.ewma_latency for h in live)
    return sorted(
        h.tenant_id for h in live
        if h.observed_count >= min_observations and h.ewma_latency > threshold_ratio * median
    )


class TenantEvicted(RuntimeError):
    pass


class SpaceTimeScheduler:
    """Single-actor scheduler state: queue, cache, health table, evictions."""

    def __init__(self, policy: BatchPolicy, device: DeviceSpec,
                 detector: DetectorParams | None = None, tenants: Iterable[int] = ()):
        self.policy = policy
        self.device = device
        self.detector = detector or DetectorParams()
        self.queue = RequestQueue()
        self.cache = SuperKernelCache()
        self.healths = {t: TenantHealth(t, ewma_alpha=self.detector.ewma_alpha) for t in tenants}
        self.evicted: dict[int, int] = {}
        self.cancelled: list[KernelRequest] = []

    def enqueue(self, request: KernelRequest) -> None:
        if request.tenant_id in self.evicted:
            raise TenantEvicted(f"tenant {request.tenant_id} was evicted")
        self.queue.add(request)

    def form(self, now: int, capacity: int | None = None) -> list[SuperKernel]:
        return form_batches(self.queue, now, self.policy, self.device, capacity)

    def next_trigger(self) -> int | None:
        return next_trigger(self.queue, self.policy, self.device)

    def dispatch(self, super_kernel: SuperKernel, start: int) -> DispatchEvent:
        ev, _ = dispatch(super_kernel, self.cache, self.device, start)
        return ev

    def record(self, tenant_id: int, latency: float) -> None:
        if tenant_id not in self.evicted:
            record_latency(self.healths, tenant_id, latency, self.detector.ewma_alpha)

    def stragglers(self) -> list[int]:
        return detect_stragglers(self.healths, self.detector.threshold_ratio,
                                 self.detector.min_observations)

    def observe(self, tenant_id: int, latency: float) -> list[int]:
        """Record one kernel latency; return tenants that are now stragglers."""
        if tenant_id in self.evicted:
            return []
        self.record(tenant_id, latency)
        return self.stragglers()

    def evict(self, tenant_id: int, now: int) -> list[KernelRequest]:
        h = self.healths.get(tenant_id)
        if h is None:
            raise KeyError(f"unknown tenant {tenant_id}")
        if h.evicted:
            raise ValueError(f"tenant {tenant_id} already evicted")
        h.evicted = True
        self.evicted[tenant_id] = now
        gone = self.queue.remove_tenant(tenant_id)
        self.cancelled.extend(gone)
        return gone
