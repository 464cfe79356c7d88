import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from gpushare.cost_model import DeviceSpec, GemmShape, OutOfMemory, dispatch_duration, gemm_flops
from gpushare.engine import ConfigError, SimConfig, analytic_oracle, inject_degradation, run
from gpushare.metrics import aggregate
from gpushare.policies import PolicyParams, to_ticks
from gpushare.workload import Tenant, get_preset

DEV = DeviceSpec()
CONV = GemmShape(256, 128, 1152)


def cfg(policy, n=1, layers=(CONV,), duration=0.02, **kw):
    tenants = tuple(Tenant(i, layers) for i in range(n))
    return SimConfig(DEV, policy, tenants, duration=duration, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg("time-mux", duration=0.01, warmup=0.01)
    with pytest.raises(ConfigError, match="exclusive requires single tenant"):
        cfg("exclusive", n=2)
    with pytest.raises(ConfigError, match="architecture"):
        SimConfig(DEV, "time-mux", (Tenant(0, (CONV,)), Tenant(1, (GemmShape(1, 1, 1),))))
    with pytest.raises(ConfigError):
        cfg("time-mux", mode="microbench", layers=(CONV, CONV))
    assert cfg("time-mux", duration=1.0).warmup == pytest.approx(0.1)


def test_single_tenant_exclusive_steady_state():
    c = cfg("exclusive")
    m = aggregate(run(c), c)
    t = dispatch_duration([CONV], DEV).duration
    assert m.mean_latency == pytest.approx(t, rel=1e-9)
    assert m.p99 == pytest.approx(t, rel=1e-9)


def test_microbench_space_time_scales_to_the_knee():
    tput = {}
    for r in (1, 5, 10, 20, 30, 40):
        c = cfg("space-time", n=r, mode="microbench", duration=0.01)
        tput[r] = aggregate(run(c), c).throughput_gflops
    assert tput[10] == pytest.approx(10 * tput[1], rel=0.03)
    assert tput[20] == pytest.approx(20 * tput[1], rel=0.03)
    assert tput[40] == pytest.approx(tput[20], rel=0.03)


def test_same_seed_same_trace():
    c = cfg("space-implicit", n=7, duration=0.005, seed=11)
    assert run(c).to_ndjson() == run(c).to_ndjson()


def test_different_seed_changes_spatial_jitter():
    a = run(cfg("space-implicit", n=7, duration=0.005, seed=1)).to_ndjson()
    b = run(cfg("space-implicit", n=7, duration=0.005, seed=2)).to_ndjson()
    assert a != b


def test_out_of_memory_refuses_to_start():
    rn = get_preset("resnet50")
    c = SimConfig(DEV, "space-implicit", tuple(rn.tenants(18)), duration=0.1)
    with pytest.raises(OutOfMemory) as e:
        run(c)
    assert e.value.mode.value == "process_per_tenant"
    assert e.value.required > e.value.capacity


def test_microbench_streams_share_one_context():
    c = cfg("time-mux", n=40, mode="microbench", duration=0.002)
    assert c.switch_cost == 0.0
    assert run(c).peak_memory < DEV.mem_capacity


def test_forward_pass_layers_execute_in_order():
    layers = get_preset("mobilenetv2").layers[:6]
    c = cfg("space-time", n=3, layers=layers, duration=0.01)
    # a tenant's next kernel never starts before its previous kernel finished
    last_done = {}
    for ev in sorted(run(c).events, key=lambda e: e.start):
        for tid, t in zip(ev.member_tenants, ev.completions):
            if tid in last_done:
                assert ev.start >= last_done[tid]
            last_done[tid] = t


def test_oracle_examples():
    t = dispatch_duration([CONV], DEV).duration
    ex = analytic_oracle(cfg("exclusive"))
    assert ex.latency == pytest.approx(t, rel=1e-12)
    tm = analytic_oracle(cfg("time-mux", n=5))
    assert tm.latency == pytest.approx(5 * (t + DEV.context_switch_overhead), rel=1e-12)
    st_ = analytic_oracle(cfg("space-time", n=20))
    assert st_.latency == pytest.approx(DEV.launch_overhead + 20 * gemm_flops(CONV) / 14e12, rel=1e-12)
    with pytest.raises(ValueError):
        analytic_oracle(cfg("space-implicit", n=2))


def test_inject_degradation_contract():
    c = cfg("space-time", n=4, duration=0.01)
    with pytest.raises(KeyError):
        inject_degradation(c, 9, 2.0)
    with pytest.raises(ValueError):
        inject_degradation(c, 0, 0.5)
    same = inject_degradation(c, 0, 1.0)
    assert run(same).to_ndjson() == run(c).to_ndjson()
    late = inject_degradation(c, 0, 2.0, start=1.0)
    assert run(late).to_ndjson() == run(c).to_ndjson()


def test_degraded_tenant_flagged_quickly():
    c = inject_degradation(cfg("space-time", n=10, duration=0.05, mode="microbench"), 3, 2.0)
    trace = run(c)
    assert list(trace.evictions) == [3]
    done_before = [x for x in trace.completions if x.tenant_id == 3
                   and x.complete_time <= trace.evictions[3]]
    assert len(done_before) <= c.detector.min_observations
    assert trace.cancellations and all(x.tenant_id == 3 for x in trace.cancellations)


def test_trace_ndjson_is_time_ordered():
    c = cfg("space-implicit", n=3, duration=0.003)
    import json
    recs = [json.loads(line) for line in run(c).to_ndjson().splitlines()]
    keys = [r.get("start", r.get("complete", r.get("time"))) for r in recs]
    assert keys == sorted(keys)


# -- properties ---------------------------------------------------------------

POLICIES = ["time-mux", "space-implicit", "space-explicit", "space-time"]


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(POLICIES), st.integers(1, 12), st.integers(0, 2**31), st.integers(1, 2))
def test_saturation_and_causality(policy, n, seed, conc):
    layers = get_preset("mobilenetv2").layers[:4]
    tenants = tuple(Tenant(i, layers, concurrency=conc) for i in range(n))
    c = SimConfig(DEV, policy, tenants, duration=0.004, seed=seed)
    trace = run(c)
    ids = [x.request_id for x in trace.completions]
    assert len(ids) == len(set(ids))
    for x in trace.completions:
        assert x.enqueue_time <= x.dispatch_time < x.complete_time
    starts = [e.start for e in trace.events]
    assert starts == sorted(starts)
    # closed loop: every pass after a tenant's first ones starts at an earlier completion
    ends = {(x.tenant_id, x.complete_time) for x in trace.completions}
    for x in trace.completions:
        if x.enqueue_time > 0:
            assert (x.tenant_id, x.enqueue_time) in ends


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(POLICIES + ["exclusive"]), st.integers(1, 8), st.integers(0, 1000))
def test_event_flops_match_completed_kernel_flops(policy, n, seed):
    if policy == "exclusive":
        n = 1
    layers = get_preset("resnet50").layers[:5]
    c = SimConfig(DEV, policy, tuple(Tenant(i, layers) for i in range(n)), duration=0.003, seed=seed,
                  policy_params=PolicyParams(batch_size=2))
    trace = run(c)
    assert sum(e.flops for e in trace.events) == trace.kernel_flops_completed


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3))
def test_work_conserving_time_mux(n, seed):
    c = cfg("time-mux", n=n, duration=0.01, seed=seed)
    evs = run(c).events
    sw = to_ticks(DEV.context_switch_overhead)
    for a, b in zip(evs, evs[1:]):
        assert b.start == a.end
        assert (b.end - b.start) - (sw if b.context_switches else 0) > 0
