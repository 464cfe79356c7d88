"""Canned experiment recipes: microbenchmark replica sweeps, the
forward-pass slowdown cell set, and exclusive-access utilization.

Run lengths are picked from a cost-model estimate of one closed-loop cycle so
each cell observes a fixed number of steady-state rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cost_model import DeviceSpec, OutOfMemory, batch_inputs, dispatch_duration
from .engine import SimConfig, run
from .metrics import RunMetrics, aggregate, geomean, slowdown_vs_exclusive, speedup_table
from .policies import PolicyKind, PolicyParams
from .scheduler import BatchPolicy, DetectorParams, super_kernel_cost
from .workload import get_preset

MICROBENCH = ("resnet18-conv2_2", "rnn-matvec", "square-256")
SWEEP_POLICIES = (PolicyKind.TIME_MUX, PolicyKind.SPACE_IMPLICIT,
                  PolicyKind.SPACE_EXPLICIT, PolicyKind.SPACE_TIME)
SLOWDOWN_MODELS = ("mobilenetv2", "resnet50")
SLOWDOWN_COUNTS = (2, 4, 6, 8, 10)
UTILIZATION_BATCH = 26


def estimate_cycle(policy: PolicyKind, layers, replicas: int, device: DeviceSpec,
                   params: PolicyParams = PolicyParams(), batch: BatchPolicy = BatchPolicy(),
                   switch_cost: float | None = None) -> float:
    """Rough seconds for every tenant to finish one forward pass."""
    switch = device.context_switch_overhead if switch_cost is None else switch_cost
    policy = PolicyKind.parse(policy)
    if policy is PolicyKind.EXCLUSIVE:
        return sum(dispatch_duration([batch_inputs(s, params.batch_size)], device).duration
                   for s in layers)
    if policy is PolicyKind.TIME_MUX:
        per_pass = sum(dispatch_duration([s], device).duration for s in layers)
        turns = -(-per_pass // params.quantum) if replicas > 1 else 0
        return replicas * (per_pass + turns * switch)
    if policy is PolicyKind.SPACE_TIME:
        return sum(super_kernel_cost([s] * replicas, device, batch).duration for s in layers)
    budget = max(1, device.slot_total // replicas)
    groups = -(-replicas // device.slot_total)
    serial = replicas * device.launch_overhead * device.launch_serialization
    return sum(
        device.space_sched_penalty * (1 + params.fairness_gap_odd)
        * (serial + groups * dispatch_duration([s], device, slot_budget=budget).duration)
        for s in layers
    )


def make_config(workload: str, policy, replicas: int, device: DeviceSpec, seed: int = 0,
                rounds: int = 40, batch_size: int = 1, scheduler: BatchPolicy = BatchPolicy(),
                detector: DetectorParams = DetectorParams(), params: PolicyParams | None = None,
                duration: float | None = None) -> SimConfig:
    preset = get_preset(workload)
    policy = PolicyKind.parse(policy)
    params = params or PolicyParams(batch_size=batch_size, rng_seed=seed)
    mode = "microbench" if len(preset.layers) == 1 else "forward_pass"
    if duration is None:
        switch = 0.0 if mode == "microbench" else None
        cycle = estimate_cycle(policy, preset.layers, replicas, device, params, scheduler, switch)
        duration = rounds * cycle / 0.9
    return SimConfig(
        device=device,
        policy=policy,
        tenants=tuple(preset.tenants(replicas)),
        policy_params=params,
        scheduler=scheduler,
        detector=detector,
        duration=duration,
        seed=seed,
        mode=mode,
        workload=workload,
    )


@dataclass(frozen=True)
class CellResult:
    workload: str
    policy: PolicyKind
    replicas: int
    seed: int
    batch: int
    status: str
    metrics: RunMetrics | None = None


def run_cell(config: SimConfig) -> CellResult:
    head = (config.workload, config.policy, config.replicas, config.seed,
            config.policy_params.batch_size)
    try:
        trace = run(config)
    except OutOfMemory:
        return CellResult(*head, "oom")
    return CellResult(*head, "ok", aggregate(trace, config))


def microbench_sweep(device: DeviceSpec, workload: str, r_values, seed: int = 0,
                     policies=SWEEP_POLICIES, rounds: int = 40) -> dict:
    """Throughput map ``(workload, R, policy) -> RunMetrics``."""
    runs = {}
    for r in r_values:
        for p in policies:
            res = run_cell(make_config(workload, p, r, device, seed, rounds))
            if res.metrics is not None:
                runs[(workload, r, PolicyKind.parse(p))] = res.metrics
    return runs


def table1(device: DeviceSpec, workload: str, r_values=range(2, 121), seed: int = 0, rounds: int = 40):
    runs = microbench_sweep(device, workload, r_values, seed, rounds=rounds)
    return speedup_table(runs, workload, r_values), runs


def time_only_speedup(runs: dict, workload: str, r_values) -> float:
    return geomean(runs[(workload, r, PolicyKind.SPACE_TIME)].throughput_gflops
                   / runs[(workload, r, PolicyKind.TIME_MUX)].throughput_gflops for r in r_values)


def slowdown_study(device: DeviceSpec, seed: int = 0, models=SLOWDOWN_MODELS, counts=SLOWDOWN_COUNTS,
                   policies=(PolicyKind.TIME_MUX, PolicyKind.SPACE_IMPLICIT, PolicyKind.SPACE_EXPLICIT),
                   rounds: int = 10) -> dict[PolicyKind, float]:
    """Geomean latency slowdown vs exclusive access serving the same ``n``
    queries as one batch, over ``models x counts``."""
    cells, base = {}, {}
    for model in models:
        for n in counts:
            cfg = make_config(model, PolicyKind.EXCLUSIVE, 1, device, seed, rounds, batch_size=n)
            base[(model, n)] = run_cell(cfg).metrics
            for p in policies:
                cells[(model, n, p)] = run_cell(make_config(model, p, n, device, seed, rounds)).metrics
    return slowdown_vs_exclusive(cells, base)


def exclusive_utilization(device: DeviceSpec, model: str = "resnet50", batch: int = UTILIZATION_BATCH,
                          rounds: int = 10) -> float:
    cfg = make_config(model, PolicyKind.EXCLUSIVE, 1, device, rounds=rounds, batch_size=batch)
    return run_cell(cfg).metrics.utilization
