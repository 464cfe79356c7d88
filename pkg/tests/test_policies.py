import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpushare.cost_model import DeviceSpec, GemmShape, OutOfMemory, dispatch_duration
from gpushare.policies import (
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
    time_mux_round,
    to_seconds,
    to_ticks,
)
from gpushare.workload import Tenant, get_preset

DEV = DeviceSpec()
CONV = GemmShape(256, 128, 1152)
NO_JITTER = PolicyParams(fairness_gap_even=0.0, fairness_gap_odd=0.0)


def kernels(n, shape=CONV):
    return [ReadyKernel(i, i, shape, i) for i in range(n)]


def test_policy_strings():
    assert [k.value for k in PolicyKind] == [
        "exclusive", "time-mux", "space-implicit", "space-explicit", "space-time"]
    with pytest.raises(ValueError, match="expected one of"):
        PolicyKind.parse("mps")


@pytest.mark.parametrize("kw", [{"quantum": 0}, {"batch_size": 0},
                                {"fairness_gap_even": 0.3, "fairness_gap_odd": 0.2}])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        PolicyParams(**kw)


def test_event_validation():
    with pytest.raises(ValueError):
        DispatchEvent(5, 5, 1, (0,), PolicyKind.EXCLUSIVE, 0.5)
    with pytest.raises(ValueError):
        DispatchEvent(0, 5, 1, (), PolicyKind.EXCLUSIVE, 0.5)
    with pytest.raises(ValueError):
        DispatchEvent(0, 5, 1, (0,), PolicyKind.EXCLUSIVE, 0.0)


def test_exclusive_single_layer_is_one_dispatch():
    t = Tenant(0, (CONV,))
    ev = exclusive_round(t, PolicyParams(), DEV)
    assert to_seconds(ev.end - ev.start) == pytest.approx(dispatch_duration([CONV], DEV).duration, rel=1e-12)
    assert ev.launches == 1


def test_exclusive_batch_20_matches_super_kernel_compute():
    t = Tenant(0, (CONV,))
    ev = exclusive_round(t, PolicyParams(batch_size=20), DEV)
    sk = dispatch_duration([(CONV, 20)], DEV)
    assert to_seconds(ev.end - ev.start) == pytest.approx(sk.duration, rel=1e-12)


def test_exclusive_multi_layer_sums_layers():
    preset = get_preset("mobilenetv2")
    t = preset.tenants(1)[0]
    ev = exclusive_round(t, PolicyParams(batch_size=3), DEV)
    assert ev.launches == len(preset.layers)
    assert ev.flops == 3 * t.pass_flops


def test_exclusive_requires_single_tenant():
    with pytest.raises(ValueError, match="exclusive requires single tenant"):
        check_exclusive([1, 2])


def test_time_mux_single_tenant_has_no_switch():
    evs = time_mux_round(kernels(1), PolicyParams(), DEV, TimeMuxState())
    assert len(evs) == 1 and evs[0].context_switches == 0
    assert to_seconds(evs[0].end) == pytest.approx(dispatch_duration([CONV], DEV).duration, rel=1e-12)


def test_time_mux_makespan():
    r = 7
    state = TimeMuxState(last_tenant=r - 1)  # wrap-around into tenant 0 also swaps
    evs = time_mux_round(kernels(r), PolicyParams(), DEV, state)
    t = dispatch_duration([CONV], DEV).duration
    assert to_seconds(evs[-1].end) == pytest.approx(r * (t + DEV.context_switch_overhead), rel=1e-9)
    assert [e.member_tenants[0] for e in evs] == list(range(r))
    for a, b in zip(evs, evs[1:]):
        assert a.end <= b.start


def test_spatial_round_costs():
    n = 10
    evs = space_implicit_round(kernels(n), NO_JITTER, DEV, np.random.default_rng(0))
    assert len(evs) == n and all(e.launches == 1 for e in evs)
    assert len({(e.start, e.end) for e in evs}) == 1
    per = dispatch_duration([CONV], DEV, slot_budget=16).duration
    base = DEV.space_sched_penalty * (n * DEV.launch_overhead * DEV.launch_serialization + per)
    assert to_seconds(evs[0].end) == pytest.approx(base, rel=1e-9)


def test_spatial_jitter_symmetry_when_disabled():
    evs = space_explicit_round(kernels(2), NO_JITTER, DEV, np.random.default_rng(1))
    assert evs[0].completions == evs[1].completions


def test_explicit_has_no_odd_anomaly():
    params = PolicyParams()
    imp = space_implicit_round(kernels(19), params, DEV, np.random.default_rng(3))
    exp = space_explicit_round(kernels(19), params, DEV, np.random.default_rng(3))
    base = min(e.completions[0] for e in imp)
    spread_imp = max(e.completions[0] for e in imp) / base
    spread_exp = max(e.completions[0] for e in exp) / min(e.completions[0] for e in exp)
    assert spread_exp <= 1 + params.fairness_gap_even + 1e-12
    assert spread_imp > spread_exp


def test_memory_modes():
    rn = get_preset("resnet50")
    with pytest.raises(OutOfMemory, match="out of device memory"):
        check_memory(PolicyKind.SPACE_IMPLICIT, rn.tenants(18), DEV)
    with pytest.raises(OutOfMemory):
        check_memory(PolicyKind.TIME_MUX, rn.tenants(18), DEV)
    check_memory(PolicyKind.SPACE_IMPLICIT, rn.tenants(17), DEV)
    check_memory(PolicyKind.SPACE_EXPLICIT, rn.tenants(60), DEV)


def test_ticks_round_trip():
    assert to_ticks(1.0) == 10**15
    assert to_seconds(to_ticks(1.25e-4)) == 1.25e-4


@settings(max_examples=40)
@given(st.integers(1, 40), st.integers(0, 2**32))
def test_spatial_round_is_deterministic(n, seed):
    a = space_implicit_round(kernels(n), PolicyParams(), DEV, np.random.default_rng(seed))
    b = space_implicit_round(kernels(n), PolicyParams(), DEV, np.random.default_rng(seed))
    assert a == b


@settings(max_examples=40)
@given(st.integers(1, 200), st.integers(0, 1000))
def test_spatial_jitter_within_ceiling(n, seed):
    params = PolicyParams()
    evs = space_implicit_round(kernels(n), params, DEV, np.random.default_rng(seed))
    ends = [e.completions[0] for e in evs]
    g = params.fairness_gap_odd if n % 2 else params.fairness_gap_even
    assert max(ends) / min(ends) <= 1 + g + 1e-12
    assert all(0 < e.occupancy <= 1 for e in evs)


@given(st.integers(1, 12), st.integers(0, 5))
def test_time_mux_events_never_overlap(n, start_tenant):
    state = TimeMuxState(last_tenant=start_tenant)
    evs = time_mux_round(kernels(n), PolicyParams(), DEV, state)
    assert sorted(e.member_requests[0] for e in evs) == list(range(n))
    for a, b in zip(evs, evs[1:]):
        assert a.end <= b.start


@given(st.integers(1, 30))
def test_equal_work_is_fair_without_jitter(n):
    evs = space_explicit_round(kernels(n), NO_JITTER, DEV, np.random.default_rng(0))
    assert len({e.completions[0] for e in evs}) == 1


@given(st.integers(2, 60), st.sampled_from(["time-mux", "space-implicit", "space-explicit"]))
def test_no_policy_beats_full_wave_exclusive(n, kind):
    params = PolicyParams()
    ks = kernels(n)
    if kind == "time-mux":
        evs = time_mux_round(ks, params, DEV, TimeMuxState())
    elif kind == "space-implicit":
        evs = space_implicit_round(ks, params, DEV, np.random.default_rng(0))
    else:
        evs = space_explicit_round(ks, params, DEV, np.random.default_rng(0))
    span = to_seconds(max(e.end for e in evs) - min(e.start for e in evs))
    bound = exclusive_round(Tenant(0, (CONV,)), PolicyParams(batch_size=20), DEV)
    assert sum(e.flops for e in evs) / span <= bound.flops / to_seconds(bound.end) * (1 + 1e-9)
