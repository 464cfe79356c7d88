import csv
import json
from pathlib import Path

import pytest

from gpushare.cli import CSV_COLUMNS, SweepSpec, main, parse_int_list, run_sweep
from gpushare.config import apply_overrides, build_config, load_config
from gpushare.engine import ConfigError

ROOT = Path(__file__).resolve().parents[1]
CONV_CFG = str(ROOT / "configs" / "conv2_2_space_time.json")
RN_CFG = str(ROOT / "configs" / "resnet50_implicit.json")
HEADER = ("schema_version,workload,policy,replicas,batch,seed,status,throughput_gflops,utilization,"
          "mean_ms,p50_ms,p99_ms,fairness_gap,slo_attainment,launches,peak_mem_bytes,cancelled")


def small(tmp_path, **sim):
    doc = {"policy": {"kind": "space-time"},
           "tenants": {"preset": "resnet18-conv2_2", "count": 4},
           "sim": {"rounds": 10, **sim}}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_header_is_exact():
    assert ",".join(CSV_COLUMNS) == HEADER


def test_run_writes_one_row(tmp_path, capsys):
    out = tmp_path / "rows.csv"
    assert main(["run", small(tmp_path), "--out", str(out)]) == 0
    assert main(["run", small(tmp_path), "--out", str(out), "--seed", "3"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 3
    rows = list(csv.DictReader(lines))
    assert [r["status"] for r in rows] == ["ok", "ok"]
    assert [r["seed"] for r in rows] == ["0", "3"]


def test_oom_exit_code(tmp_path, capsys):
    out = tmp_path / "o.csv"
    code = main(["run", RN_CFG, "--set", "tenants.count=18", "--out", str(out)])
    assert code == 2
    assert capsys.readouterr().err.startswith("oom: ")
    assert list(csv.DictReader(out.open()))[0]["status"] == "oom"


def test_explicit_sixty_resnets_fits(tmp_path):
    cfg = load_config(RN_CFG, ["policy.kind=space-explicit", "tenants.count=60"])
    assert cfg.memory_mode.value == "shared_context"


@pytest.mark.parametrize("override,needle", [
    ("policy.kindx=1", "policy.kindx"),
    ("tenants.count=0", "tenants"),
    ("policy.kind=\"mps\"", "policy.kind"),
    ("sim.seed=1.5", "sim.seed"),
])
def test_config_errors_name_key(override, needle, capsys):
    assert main(["run", RN_CFG, "--set", override]) == 1
    err = capsys.readouterr().err
    assert err.startswith("config-error: ") and needle in err


def test_missing_file_is_config_error(capsys):
    assert main(["run", "/nonexistent.json"]) == 1


def test_bad_flag_is_config_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["run", RN_CFG, "--bogus"])
    assert e.value.code == 1


def test_overrides_parse_json_values():
    doc = apply_overrides({"sim": {}}, ["sim.seed=7", "tenants.preset=resnet50", "sim.mode=\"forward_pass\""])
    assert doc == {"sim": {"seed": 7, "mode": "forward_pass"}, "tenants": {"preset": "resnet50"}}


def test_device_profile_overrides():
    cfg = build_config({"device": {"profile": "v100", "mem_capacity": 32e9},
                        "policy": {"kind": "time-mux"}, "tenants": {"preset": "resnet50"}})
    assert cfg.device.mem_capacity == 32e9
    with pytest.raises(ConfigError, match="device.peak"):
        build_config({"device": {"peak": 1}, "policy": {"kind": "time-mux"},
                      "tenants": {"preset": "resnet50"}})


def test_parse_int_list():
    assert parse_int_list("1,10-12") == (1, 10, 11, 12)
    with pytest.raises(ConfigError):
        parse_int_list("a-b")


def test_sweep_rows_count_and_order():
    spec = SweepSpec((3, 1, 2), ("space-time", "time-mux"), "square-256", (1, 0))
    rows = run_sweep(spec, {"sim": {"rounds": 5}})
    assert len(rows) == 3 * 2 * 2
    keys = [(r["policy"], int(r["replicas"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    assert {r["status"] for r in rows} == {"ok"}


def test_sweep_cli_and_report(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--workload", "square-256", "--replicas", "2,10,20", "--jobs", "1",
                 "--set", "sim.rounds=5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1 + 3 * 4
    capsys.readouterr()
    assert main(["report", str(out), "--kind", "table1"]) == 0
    text = capsys.readouterr().out
    assert "geomean" in text and "next best" in text and "R = 10" in text
    for kind in ("fig3", "fig4", "fig6"):
        assert main(["report", str(out), "--kind", kind]) == 0


def test_report_on_empty_csv(tmp_path, capsys):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert main(["report", str(p)]) == 1
    p.write_text(HEADER + "\n")
    assert main(["report", str(p)]) == 1


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ta, tb = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    cfg = small(tmp_path)
    for out, tr in ((a, ta), (b, tb)):
        assert main(["run", cfg, "--set", "policy.kind=\"space-implicit\"", "--seed", "5",
                     "--out", str(out), "--trace-out", str(tr)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert ta.read_bytes() == tb.read_bytes() and ta.stat().st_size > 0


def test_presets_lists_workloads(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    for name in ("resnet50", "mobilenetv2", "resnet18-conv2_2", "rnn-matvec", "square-256"):
        assert name in out
