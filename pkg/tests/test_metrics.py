import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpushare.cost_model import DeviceSpec, GemmShape
from gpushare.engine import RequestLifecycle, SimConfig, Trace
from gpushare.metrics import (
    MetricsError,
    aggregate,
    fairness_gap,
    geomean,
    nearest_rank,
    slowdown_vs_exclusive,
    speedup_table,
)
from gpushare.policies import PolicyKind, to_ticks
from gpushare.workload import Tenant

DEV = DeviceSpec()
CONV = GemmShape(256, 128, 1152)
P = PolicyKind


def config(n=2, duration=1.0, warmup=0.0):
    tenants = tuple(Tenant(i, (CONV,)) for i in range(n))
    return SimConfig(DEV, "space-explicit", tenants, duration=duration, warmup=warmup)


def trace(completions):
    return Trace([], completions, [], 1.0, {}, {})


def done(rid, tenant, enq, end, flops=1):
    return RequestLifecycle(rid, tenant, to_ticks(enq), to_ticks(enq), to_ticks(end), True, flops)


def test_single_kernel_throughput_example():
    window = 1.0785e-4 + 5e-6
    c = config(n=1, duration=window)
    m = aggregate(trace([done(0, 0, 0.0, window, 75_497_472)]), c)
    assert m.throughput_gflops == pytest.approx(669, rel=1e-3)
    assert m.utilization == pytest.approx(0.048, abs=5e-4)


def test_fairness_gap_examples():
    assert fairness_gap([3e-3, 3e-3, 3e-3]) == 0.0
    assert fairness_gap([8e-3, 10e-3]) == pytest.approx(0.25)
    m = aggregate(trace([done(0, 0, 0, 8e-3), done(1, 1, 0, 10e-3)]), config())
    assert m.fairness_gap == pytest.approx(0.25)


def test_evicted_tenants_leave_fairness_gap():
    t = trace([done(0, 0, 0, 8e-3), done(1, 1, 0, 10e-3), done(2, 2, 0, 40e-3)])
    t.evictions = {2: to_ticks(0.05)}
    assert aggregate(t, config(3)).fairness_gap == pytest.approx(0.25)


def test_geomean_examples():
    assert geomean([2, 8]) == pytest.approx(4)
    with pytest.raises(MetricsError):
        geomean([])
    with pytest.raises(MetricsError):
        geomean([1.0, 0.0])


def test_nearest_rank():
    xs = list(range(1, 101))
    assert nearest_rank(xs, 50) == 50
    assert nearest_rank(xs, 99) == 99
    assert nearest_rank([7], 99) == 7


def test_empty_window_raises():
    with pytest.raises(MetricsError, match="no completions in window"):
        aggregate(trace([done(0, 0, 0, 0.5)]), config(duration=1.0, warmup=0.6))


def test_all_equal_speedup_table():
    runs = {("w", r, p): 5.0 for r in (2, 3) for p in PolicyKind if p is not P.EXCLUSIVE}
    t = speedup_table(runs, "w", (2, 3))
    assert [row.ratio for row in t.rows] == [1.0, 1.0]
    assert t.geomean == 1.0


def test_next_best_is_most_frequent_family():
    runs = {}
    for r in range(2, 7):
        runs[("w", r, P.SPACE_TIME)] = 10.0
        runs[("w", r, P.TIME_MUX)] = 2.0 if r < 5 else 1.0
        runs[("w", r, P.SPACE_IMPLICIT)] = 1.0 if r < 5 else 5.0
        runs[("w", r, P.SPACE_EXPLICIT)] = 1.5
    t = speedup_table(runs, "w", range(2, 7))
    assert t.next_best == "time-only"
    assert t.ratio_at(6) == pytest.approx(2.0)


def test_missing_cell_is_named():
    runs = {("w", 2, p): 1.0 for p in (P.SPACE_TIME, P.TIME_MUX, P.SPACE_IMPLICIT)}
    with pytest.raises(MetricsError, match="w/R=2/space-explicit"):
        speedup_table(runs, "w", [2])


def test_slowdown_geomean_example():
    cells = {("m", 2, P.TIME_MUX): 2.0, ("m", 4, P.TIME_MUX): 16.0}
    base = {("m", 2): 1.0, ("m", 4): 2.0}
    assert slowdown_vs_exclusive(cells, base)[P.TIME_MUX] == pytest.approx(4.0)
    with pytest.raises(MetricsError):
        slowdown_vs_exclusive(cells, {("m", 2): 1.0})


# -- properties ---------------------------------------------------------------

pos = st.floats(1e-6, 1e6)


@given(st.lists(pos, min_size=1, max_size=30), st.floats(1e-3, 1e3))
def test_geomean_scales(xs, k):
    assert geomean([k * x for x in xs]) == pytest.approx(k * geomean(xs), rel=1e-9)


@given(st.lists(pos, min_size=1, max_size=30), st.randoms())
def test_fairness_gap_relabel_invariant(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert fairness_gap(ys) == fairness_gap(xs) >= 0


@given(st.lists(st.tuples(st.integers(0, 4), st.floats(1e-4, 0.5), st.integers(1, 10**9)),
                min_size=1, max_size=50))
def test_aggregate_invariants(items):
    comps = [done(i, t, 0.0, lat, f) for i, (t, lat, f) in enumerate(items)]
    m = aggregate(trace(comps), config(5))
    assert 0 <= m.utilization <= 1
    assert m.p50 <= m.p99
    assert m.fairness_gap >= 0
    assert min(lat for _, lat, _ in items) <= m.mean_latency * (1 + 1e-9)
    assert math.isclose(m.throughput_gflops * 1e9, sum(f for *_, f in items), rel_tol=1e-12)
