"""Deterministic discrete-event simulation of tenants sharing one GPU.

Tenants are closed-loop: each keeps ``concurrency`` forward passes in flight
and issues a new one the instant one finishes. A forward pass is a chain of
kernels, one per layer; layer ``i + 1`` becomes ready when layer ``i``
completes. The device runs one dispatch decision at a time (a kernel, a
spatial round, or a super-kernel) chosen by the configured policy.

Virtual time is an integer tick count. Simultaneous events are processed in
``(time, phase, tenant_id, request_id)`` order, where completions (phase 0)
precede device decisions (phase 1).
"""

from __future__ import annotations

import dataclasses
import heapq
import io
import json
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .cost_model import (
    DeviceSpec,
    SharingMode,
    batch_inputs,
    dispatch_duration,
    gemm_flops,
)
from .policies import (
    DispatchEvent,
    PolicyKind,
    PolicyParams,
    ReadyKernel,
    TimeMuxState,
    check_exclusive,
    check_memory,
    exclusive_round,
    space_explicit_round,
    space_implicit_round,
    time_mux_step,
    to_seconds,
    to_ticks,
)
from .scheduler import (
    BatchPolicy,
    DetectorParams,
    KernelRequest,
    SpaceTimeScheduler,
    SuperKernel,
    shape_signature,
    super_kernel_cost,
)
from .workload import Tenant

MODES = ("forward_pass", "microbench")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Degradation:
    tenant_id: int
    slowdown: float
    start: float


@dataclass(frozen=True)
class SimConfig:
    device: DeviceSpec
    policy: PolicyKind
    tenants: tuple[Tenant, ...]
    policy_params: PolicyParams = PolicyParams()
    scheduler: BatchPolicy = BatchPolicy()
    detector: DetectorParams = DetectorParams()
    duration: float = 0.1
    warmup: float | None = None
    seed: int = 0
    mode: str = "forward_pass"
    workload: str = ""
    degradations: tuple[Degradation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "policy", PolicyKind.parse(self.policy))
        object.__setattr__(self, "tenants", tuple(self.tenants))
        object.__setattr__(self, "degradations", tuple(self.degradations))
        if self.warmup is None:
            object.__setattr__(self, "warmup", 0.1 * self.duration)
        if self.policy_params.rng_seed != self.seed:
            object.__setattr__(self, "policy_params",
                               dataclasses.replace(self.policy_params, rng_seed=self.seed))
        if not self.duration > self.warmup >= 0:
            raise ConfigError("need duration > warmup >= 0")
        if not self.tenants:
            raise ConfigError("at least one tenant is required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len({t.layers for t in self.tenants}) != 1:
            raise ConfigError("tenants must share one architecture (identical layers)")
        if len({t.tenant_id for t in self.tenants}) != len(self.tenants):
            raise ConfigError("duplicate tenant ids")
        if self.mode == "microbench" and len(self.tenants[0].layers) != 1:
            raise ConfigError("microbench tenants issue a single GEMM")
        ids = {t.tenant_id for t in self.tenants}
        for d in self.degradations:
            if d.tenant_id not in ids:
                raise ConfigError(f"degradation names unknown tenant {d.tenant_id}")
            if d.slowdown < 1 or d.start < 0:
                raise ConfigError("degradation needs slowdown >= 1 and start >= 0")
        if self.policy is PolicyKind.EXCLUSIVE:
            try:
                check_exclusive(self.tenants)
            except ValueError as e:
                raise ConfigError(str(e)) from None

    @property
    def memory_mode(self) -> SharingMode:
        """Microbenchmarks queue every stream from one harness process."""
        if self.mode == "microbench":
            return SharingMode.SHARED_CONTEXT
        return self.policy.memory_mode

    @property
    def switch_cost(self) -> float:
        """Context swap cost between tenants; streams of one process pay none."""
        if self.memory_mode is SharingMode.SHARED_CONTEXT:
            return 0.0
        return self.device.context_switch_overhead

    @property
    def replicas(self) -> int:
        return len(self.tenants)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        t = self.tenants[0]
        return {
            "workload": self.workload,
            "policy": self.policy.value,
            "replicas": self.replicas,
            "mode": self.mode,
            "duration": self.duration,
            "warmup": self.warmup,
            "seed": self.seed,
            "layers": len(t.layers),
            "concurrency": t.concurrency,
            "policy_params": dataclasses.asdict(self.policy_params),
            "scheduler": dataclasses.asdict(self.scheduler),
            "detector": dataclasses.asdict(self.detector),
            "device": self.device.to_dict(),
            "degradations": [dataclasses.asdict(d) for d in self.degradations],
        }


@dataclass(frozen=True)
class RequestLifecycle:
    request_id: int
    tenant_id: int
    enqueue_time: int
    dispatch_time: int
    complete_time: int
    slo_met: bool
    flops: int

    @property
    def latency(self) -> float:
        return to_seconds(self.complete_time - self.enqueue_time)


@dataclass(frozen=True)
class Cancellation:
    request_id: int
    tenant_id: int
    time: int


@dataclass
class Trace:
    events: list[DispatchEvent]
    completions: list[RequestLifecycle]
    cancellations: list[Cancellation]
    peak_memory: float
    cache_stats: dict
    config_echo: dict
    evictions: dict[int, int] = field(default_factory=dict)
    kernel_flops_completed: int = 0

    def records(self) -> Iterable[dict]:
        rows = []
        for e in self.events:
            rows.append(((e.start, 0, e.member_requests[0]), e.to_json()))
        for c in self.completions:
            rows.append(((c.complete_time, 1, c.request_id), {
                "type": "complete", "request": c.request_id, "tenant": c.tenant_id,
                "enqueue": c.enqueue_time, "dispatch": c.dispatch_time,
                "complete": c.complete_time, "slo_met": c.slo_met, "flops": c.flops,
            }))
        for c in self.cancellations:
            rows.append(((c.time, 2, c.request_id), {
                "type": "cancel", "request": c.request_id, "tenant": c.tenant_id, "time": c.time,
            }))
        for t, tick in sorted(self.evictions.items()):
            rows.append(((tick, 3, t), {"type": "evict", "tenant": t, "time": tick}))
        rows.sort(key=lambda r: r[0])
        return [r for _, r in rows]

    def write_ndjson(self, fh: IO[str]) -> None:
        for rec in self.records():
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    def to_ndjson(self) -> str:
        buf = io.StringIO()
        self.write_ndjson(buf)
        return buf.getvalue()


@dataclass
class _Pass:
    pass_id: int
    tenant_id: int
    enqueue: int
    layer: int = 0
    dispatch: int | None = None
    cancelled: bool = False


_DONE, _DEVICE, _WAKE = "done", "device", "wake"


class _Simulation:
    def __init__(self, config: SimConfig):
        self.cfg = config
        self.dev = config.device
        self.tm_dev = config.device.replace(context_switch_overhead=config.switch_cost)
        self.kind = config.policy
        self.tenants = {t.tenant_id: t for t in config.tenants}
        self.stop = to_ticks(config.duration)
        self.rng = np.random.default_rng(config.seed)
        self.heap: list = []
        self.seq = 0
        self.passes: dict[int, _Pass] = {}
        self.next_pass = 0
        self.next_kernel = 0
        self.busy_until = 0
        self.wake_at: int | None = None
        self.observed = False
        self.events: list[DispatchEvent] = []
        self.completions: list[RequestLifecycle] = []
        self.cancellations: list[Cancellation] = []
        self.kernel_flops = 0
        self.kernel_pass: dict[int, tuple[int, int, int]] = {}  # kernel -> (pass, layer, flops)
        self.degrade = {d.tenant_id: d for d in config.degradations}

        self.ready: dict[int, list[ReadyKernel]] = {t: [] for t in self.tenants}
        self.tm_state = TimeMuxState()
        self.excl_queue: deque[int] = deque()
        self.sched = None
        self.sk_backlog: deque = deque()
        if self.kind is PolicyKind.SPACE_TIME:
            self.sched = SpaceTimeScheduler(config.scheduler, self.dev, config.detector,
                                            tenants=self.tenants)
        batch = config.policy_params.batch_size if self.kind is PolicyKind.EXCLUSIVE else 1
        self.batch = batch
        layers = config.tenants[0].layers
        self.layer_flops = [gemm_flops(batch_inputs(s, batch)) for s in layers]
        self.pass_flops = sum(self.layer_flops)

    # -- heap -------------------------------------------------------------
    def push(self, tick: int, phase: int, tenant: int, req: int, kind: str, payload=None):
        heapq.heappush(self.heap, (tick, phase, tenant, req, self.seq, kind, payload))
        self.seq += 1

    # -- tenants ----------------------------------------------------------
    def new_pass(self, tenant_id: int, now: int) -> None:
        pid = self.next_pass
        self.next_pass += 1
        self.passes[pid] = _Pass(pid, tenant_id, now)
        if self.kind is PolicyKind.EXCLUSIVE:
            self.excl_queue.append(pid)
        else:
            self.ready_layer(self.passes[pid], now)

    def ready_layer(self, p: _Pass, now: int) -> None:
        tenant = self.tenants[p.tenant_id]
        shape = tenant.layers[p.layer]
        kid = self.next_kernel
        self.next_kernel += 1
        self.kernel_pass[kid] = (p.pass_id, p.layer, self.layer_flops[p.layer])
        if self.sched is not None:
            n = len(tenant.layers)
            deadline = p.enqueue + to_ticks(tenant.slo_latency) * (p.layer + 1) // n
            self.sched.enqueue(KernelRequest(kid, p.tenant_id, shape, now,
                                             max(deadline, now + 1), p.layer))
        else:
            self.ready[p.tenant_id].append(ReadyKernel(kid, p.tenant_id, shape, p.pass_id))

    def live_capacity(self) -> int:
        evicted = self.sched.evicted if self.sched else {}
        return sum(t.concurrency for tid, t in self.tenants.items() if tid not in evicted)

    # -- device -----------------------------------------------------------
    def decide(self, now: int) -> list[DispatchEvent]:
        kind = self.kind
        if kind is PolicyKind.EXCLUSIVE:
            if not self.excl_queue:
                return []
            pid = self.excl_queue.popleft()
            tenant = self.tenants[self.passes[pid].tenant_id]
            self.kernel_pass[pid] = (pid, len(tenant.layers) - 1, self.pass_flops)
            return [exclusive_round(tenant, self.cfg.policy_params, self.dev, now, pid)]
        if kind is PolicyKind.TIME_MUX:
            ev = time_mux_step(self.ready, self.cfg.policy_params, self.tm_dev, self.tm_state, now)
            if ev is None:
                return []
            rid = ev.member_requests[0]
            ks = self.ready[ev.member_tenants[0]]
            ks[:] = [k for k in ks if k.request_id != rid]
            return [ev]
        if kind in (PolicyKind.SPACE_IMPLICIT, PolicyKind.SPACE_EXPLICIT):
            batch = [k for t in sorted(self.ready) for k in self.ready[t]]
            if not batch:
                return []
            for t in self.ready:
                self.ready[t] = []
            fn = space_implicit_round if kind is PolicyKind.SPACE_IMPLICIT else space_explicit_round
            return fn(batch, self.cfg.policy_params, self.dev, self.rng, now)
        # space-time
        if not self.sk_backlog:
            self.sk_backlog.extend(self.sched.form(now, self.live_capacity()))
        while self.sk_backlog:
            sk = self.sk_backlog.popleft()
            live = tuple(r for r in sk.requests if r.tenant_id not in self.sched.evicted)
            if len(live) != len(sk.requests):
                self.cancel_requests([r for r in sk.requests if r.tenant_id in self.sched.evicted], now)
                if not live:
                    continue
                shapes = [r.shape for r in live]
                sk = SuperKernel(shape_signature(shapes), live, len(set(shapes)) == 1,
                                 super_kernel_cost(shapes, self.dev, self.cfg.scheduler))
            return [self.sched.dispatch(sk, now)]
        trigger = self.sched.next_trigger()
        if trigger is not None:
            trigger = max(trigger, now + 1)
            if self.wake_at is None or trigger < self.wake_at or self.wake_at <= now:
                self.wake_at = trigger
                self.push(trigger, 1, -1, -1, _WAKE)
        return []

    def try_dispatch(self, now: int) -> None:
        if now < self.busy_until or now >= self.stop:
            return
        events = self.decide(now)
        if not events:
            return
        end = max(e.end for e in events)
        self.busy_until = end
        for ev in events:
            self.events.append(ev)
            for rid, tid, done in zip(ev.member_requests, ev.member_tenants, ev.completions):
                pid = self.kernel_pass[rid][0]
                p = self.passes[pid]
                if p.dispatch is None:
                    p.dispatch = ev.start
                d = self.degrade.get(tid)
                if d is not None and to_seconds(ev.start) >= d.start and d.slowdown != 1:
                    done = ev.start + round((done - ev.start) * d.slowdown)
                self.push(done, 0, tid, rid, _DONE, ev.start)
        self.push(end, 1, -1, -1, _DEVICE)

    # -- completions ------------------------------------------------------
    def kernel_done(self, now: int, tenant_id: int, kid: int, started: int) -> None:
        pid, layer, flops = self.kernel_pass.pop(kid)
        self.kernel_flops += flops
        p = self.passes[pid]
        tenant = self.tenants[tenant_id]
        if self.sched is not None and self.cfg.detector.evict_stragglers:
            self.sched.record(tenant_id, to_seconds(now - started))
            self.observed = True
        evicted = self.sched is not None and tenant_id in self.sched.evicted
        if p.cancelled:
            return
        if evicted:
            p.cancelled = True
            self.cancellations.append(Cancellation(pid, tenant_id, now))
            return
        if self.kind is not PolicyKind.EXCLUSIVE and layer + 1 < len(tenant.layers):
            p.layer = layer + 1
            self.ready_layer(p, now)
            return
        latency = now - p.enqueue
        self.completions.append(RequestLifecycle(
            pid, tenant_id, p.enqueue, p.dispatch, now,
            latency <= to_ticks(tenant.slo_latency), self.pass_flops))
        del self.passes[pid]
        if now < self.stop:
            self.new_pass(tenant_id, now)

    def evict(self, tenant_id: int, now: int) -> None:
        if tenant_id in self.sched.evicted:
            return
        self.cancel_requests(self.sched.evict(tenant_id, now), now)

    def cancel_requests(self, requests, now: int) -> None:
        for r in requests:
            pid = self.kernel_pass.pop(r.request_id)[0]
            p = self.passes[pid]
            if not p.cancelled:
                p.cancelled = True
                self.cancellations.append(Cancellation(pid, r.tenant_id, now))

    # -- main loop --------------------------------------------------------
    def run(self) -> Trace:
        for tid in sorted(self.tenants):
            for _ in range(self.tenants[tid].concurrency):
                self.new_pass(tid, 0)
        self.try_dispatch(0)
        heap = self.heap
        while heap:
            now = heap[0][0]
            while heap and heap[0][0] == now:
                _, _, tenant, req, _, kind, payload = heapq.heappop(heap)
                if kind == _DONE:
                    self.kernel_done(now, tenant, req, payload)
            if self.observed:
                self.observed = False
                for t in self.sched.stragglers():
                    self.evict(t, now)
            if now >= self.busy_until:
                self.try_dispatch(now)
        cache = {}
        if self.sched is not None:
            c = self.sched.cache
            cache = {"hits": c.hits, "misses": c.misses, "entries": len(c.entries)}
        return Trace(
            events=self.events,
            completions=self.completions,
            cancellations=self.cancellations,
            peak_memory=0.0,
            cache_stats=cache,
            config_echo=self.cfg.echo(),
            evictions=dict(self.sched.evicted) if self.sched else {},
            kernel_flops_completed=self.kernel_flops,
        )


def run(config: SimConfig) -> Trace:
    """Simulate ``config``; raises :class:`OutOfMemory` if the tenants do not
    fit under the policy's memory mode."""
    peak = check_memory(config.policy, config.tenants, config.device, config.memory_mode)
    trace = _Simulation(config).run()
    trace.peak_memory = peak
    return trace


def inject_degradation(config: SimConfig, tenant_id: int, slowdown: float, start: float = 0.0) -> SimConfig:
    """Stretch ``tenant_id``'s kernel completions by ``slowdown`` from ``start``.

    The delay is tenant-local: co-scheduled members of the same dispatch and
    the device itself are unaffected.
    """
    if tenant_id not in {t.tenant_id for t in config.tenants}:
        raise KeyError(f"unknown tenant {tenant_id}")
    if slowdown < 1:
        raise ValueError("slowdown must be >= 1")
    kept = tuple(d for d in config.degradations if d.tenant_id != tenant_id)
    return config.replace(degradations=kept + (Degradation(tenant_id, slowdown, start),))


@dataclass(frozen=True)
class OraclePrediction:
    latency: float
    throughput: float


def analytic_oracle(config: SimConfig) -> OraclePrediction:
    """Closed-form steady-state latency (seconds) and throughput (FLOP/s).

    Supports single-layer tenants with one request in flight under exclusive
    access, time multiplexing, or space-time batching where every round
    gathers all tenants into one super-kernel.
    """
    tenants = config.tenants
    layers = tenants[0].layers
    if len(layers) != 1 or any(t.concurrency != 1 for t in tenants):
        raise ValueError("oracle needs single-layer tenants with concurrency 1")
    if config.degradations:
        raise ValueError("oracle does not model degradation")
    shape = layers[0]
    dev = config.device
    r = len(tenants)
    if config.policy is PolicyKind.EXCLUSIVE:
        shape = batch_inputs(shape, config.policy_params.batch_size)
        t = dispatch_duration([shape], dev).duration
        return OraclePrediction(t, gemm_flops(shape) / t)
    if config.policy is PolicyKind.TIME_MUX:
        t = dispatch_duration([shape], dev).duration
        c = config.switch_cost if r > 1 else 0.0
        return OraclePrediction(r * (t + c), gemm_flops(shape) / (t + c))
    if config.policy is PolicyKind.SPACE_TIME:
        if config.scheduler.target_batch < r or config.scheduler.allow_variable_size:
            raise ValueError("oracle needs target_batch covering every tenant")
        t = super_kernel_cost([shape] * r, dev, config.scheduler).duration
        return OraclePrediction(t, r * gemm_flops(shape) / t)
    raise ValueError(f"oracle does not support {config.policy.value}")
