"""Aggregation of simulation traces into throughput, latency, fairness and
speedup summaries. Everything here is a pure function of its inputs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .policies import PolicyKind, to_seconds, to_ticks

COMPETITORS = (PolicyKind.TIME_MUX, PolicyKind.SPACE_IMPLICIT, PolicyKind.SPACE_EXPLICIT)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RunMetrics:
    throughput_gflops: float
    mean_latency: float
    p50: float
    p99: float
    fairness_gap: float
    utilization: float
    peak_memory: float
    launches: int
    slo_attainment: float
    cancelled: int
    tenant_means: dict = field(default_factory=dict, compare=False)

    @property
    def throughput(self) -> float:
        return self.throughput_gflops * 1e9


def geomean(values: Iterable[float]) -> float:
    xs = list(values)
    if not xs:
        raise MetricsError("geomean of empty set")
    if any(x <= 0 for x in xs):
        raise MetricsError("geomean needs positive values")
    return math.exp(math.fsum(math.log(x) for x in xs) / len(xs))


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile, ``q`` in (0, 100]."""
    n = len(sorted_values)
    rank = max(1, math.ceil(q / 100.0 * n))
    return sorted_values[rank - 1]


def fairness_gap(means: Iterable[float]) -> float:
    ms = list(means)
    if len(ms) < 2:
        return 0.0
    lo = min(ms)
    return (max(ms) - lo) / lo


def aggregate(trace, config, window: tuple[float, float] | None = None,
              tenants: Iterable[int] | None = None) -> RunMetrics:
    """Summarize completions whose finish time lies in ``window`` (seconds;
    defaults to ``[warmup, duration]``). ``tenants`` restricts latency
    statistics to a subset of tenant ids."""
    lo_s, hi_s = window if window is not None else (config.warmup, config.duration)
    lo, hi = to_ticks(lo_s), to_ticks(hi_s)
    keep = set(tenants) if tenants is not None else None
    done = [c for c in trace.completions if lo <= c.complete_time <= hi
            and (keep is None or c.tenant_id in keep)]
    if not done:
        raise MetricsError("no completions in window")
    span = hi_s - lo_s
    flops = sum(c.flops for c in done)
    throughput = flops / span
    lat = sorted(c.complete_time - c.enqueue_time for c in done)
    per_tenant: dict[int, list[int]] = {}
    for c in done:
        per_tenant.setdefault(c.tenant_id, []).append(c.complete_time - c.enqueue_time)
    evicted = set(getattr(trace, "evictions", {}) or {})
    means = {t: to_seconds(sum(v)) / len(v) for t, v in sorted(per_tenant.items())}
    gap = fairness_gap(m for t, m in means.items() if t not in evicted)
    launches = sum(e.launches for e in trace.events if lo <= e.start < hi)
    return RunMetrics(
        throughput_gflops=throughput / 1e9,
        mean_latency=to_seconds(sum(lat)) / len(lat),
        p50=to_seconds(nearest_rank(lat, 50)),
        p99=to_seconds(nearest_rank(lat, 99)),
        fairness_gap=gap,
        utilization=min(1.0, throughput / config.device.peak_flops),
        peak_memory=trace.peak_memory,
        launches=launches,
        slo_attainment=sum(c.slo_met for c in done) / len(done),
        cancelled=len(trace.cancellations),
        tenant_means=means,
    )


@dataclass(frozen=True)
class SpeedupRow:
    replicas: int
    ratio: float
    best_competitor: PolicyKind


@dataclass(frozen=True)
class SpeedupTable:
    workload: str
    rows: tuple[SpeedupRow, ...]
    geomean: float
    next_best: str

    def ratio_at(self, replicas: int) -> float:
        for r in self.rows:
            if r.replicas == replicas:
                return r.ratio
        raise KeyError(replicas)


def _throughput(m) -> float:
    return m.throughput_gflops if isinstance(m, RunMetrics) else float(m)


def speedup_table(runs: Mapping[tuple, object], workload: str, r_range: Iterable[int],
                  competitors: Sequence[PolicyKind] = COMPETITORS) -> SpeedupTable:
    """Space-time throughput over the best competitor for each R.

    ``runs`` maps ``(workload, R, policy)`` to :class:`RunMetrics` (or a bare
    throughput). The next-best label is the coarse family (time-only or
    space-only) of the competitor that wins most often across the range.
    """
    rows = []
    missing = []
    for r in r_range:
        keys = [(workload, r, PolicyKind.SPACE_TIME)] + [(workload, r, p) for p in competitors]
        absent = [k for k in keys if k not in runs]
        if absent:
            missing.extend(absent)
            continue
        tput = {p: _throughput(runs[(workload, r, p)]) for p in competitors}
        best = max(competitors, key=lambda p: (tput[p], -competitors.index(p)))
        rows.append(SpeedupRow(r, _throughput(runs[keys[0]]) / tput[best], best))
    if missing:
        names = ", ".join(f"{w}/R={r}/{p.value}" for w, r, p in missing)
        raise MetricsError(f"missing cells: {names}")
    if not rows:
        raise MetricsError("empty R range")
    wins = Counter(row.best_competitor.label for row in rows)
    order = [p.label for p in competitors]
    next_best = max(wins, key=lambda lab: (wins[lab], -order.index(lab)))
    return SpeedupTable(workload, tuple(rows), geomean(r.ratio for r in rows), next_best)


def slowdown_vs_exclusive(cells: Mapping[tuple, object],
                          baselines: Mapping[tuple, object]) -> dict[PolicyKind, float]:
    """Geomean latency slowdown per policy.

    ``cells`` maps ``(model, n, policy)`` to the policy's metrics with ``n``
    tenants; ``baselines`` maps ``(model, n)`` to exclusive access serving the
    same ``n`` queries as one batch. A cell's slowdown is its mean latency
    over the baseline's.
    """
    per_policy: dict[PolicyKind, list[float]] = {}
    for (model, n, policy), m in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value)):
        if (model, n) not in baselines:
            raise MetricsError(f"missing exclusive baseline for {model} n={n}")
        base = baselines[(model, n)]
        lat = m.mean_latency if isinstance(m, RunMetrics) else float(m)
        ref = base.mean_latency if isinstance(base, RunMetrics) else float(base)
        per_policy.setdefault(PolicyKind.parse(policy), []).append(lat / ref)
    return {p: geomean(v) for p, v in per_policy.items()}
