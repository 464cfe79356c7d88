"""Command-line front end.

Subcommands: ``run``, ``sweep``, ``report``, ``calibrate``, ``presets``.
Errors go to stderr as one line ``<reason>: <message>`` with exit codes
1 (config), 2 (out of memory), 3 (internal), 4 (calibration not met).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import apply_overrides, build_config, load_document
from .cost_model import OutOfMemory
from .engine import ConfigError, SimConfig, run
from .metrics import MetricsError, RunMetrics, aggregate, speedup_table
from .policies import PolicyKind
from .workload import PRESETS

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version", "workload", "policy", "replicas", "batch", "seed", "status",
    "throughput_gflops", "utilization", "mean_ms", "p50_ms", "p99_ms", "fairness_gap",
    "slo_attainment", "launches", "peak_mem_bytes", "cancelled",
)
EXIT_OK, EXIT_CONFIG, EXIT_OOM, EXIT_INTERNAL, EXIT_CALIBRATION = 0, 1, 2, 3, 4
REPORTS = ("table1", "fig3", "fig4", "fig6")


class CliError(Exception):
    def __init__(self, code: int, reason: str, message: str):
        super().__init__(message)
        self.code = code
        self.reason = reason


def _num(x: float) -> str:
    return format(x, ".12g")


def csv_row(config: SimConfig, status: str, m: RunMetrics | None, peak_memory: float | None = None) -> dict:
    row = {
        "schema_version": SCHEMA_VERSION,
        "workload": config.workload,
        "policy": config.policy.value,
        "replicas": config.replicas,
        "batch": config.policy_params.batch_size,
        "seed": config.seed,
        "status": status,
    }
    if m is None:
        row.update({k: "" for k in CSV_COLUMNS if k not in row})
        if peak_memory is not None:
            row["peak_mem_bytes"] = _num(peak_memory)
        return row
    row.update({
        "throughput_gflops": _num(m.throughput_gflops),
        "utilization": _num(m.utilization),
        "mean_ms": _num(m.mean_latency * 1e3),
        "p50_ms": _num(m.p50 * 1e3),
        "p99_ms": _num(m.p99 * 1e3),
        "fairness_gap": _num(m.fairness_gap),
        "slo_attainment": _num(m.slo_attainment),
        "launches": m.launches,
        "peak_mem_bytes": _num(m.peak_memory),
        "cancelled": m.cancelled,
    })
    return row


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _write_rows(rows, out: str | None, append: bool) -> None:
    text = format_csv(rows)
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if append and path.exists() and path.stat().st_size > 0:
        text = text.split("\n", 1)[1]
        with path.open("a", newline="") as fh:
            fh.write(text)
    else:
        path.write_text(text)


def execute(config: SimConfig, trace_out: str | None = None) -> dict:
    """Run one cell and return its CSV row. Out-of-memory becomes status ``oom``."""
    try:
        trace = run(config)
    except OutOfMemory as e:
        return csv_row(config, "oom", None, e.required)
    if trace_out:
        with open(trace_out, "w") as fh:
            trace.write_ndjson(fh)
    try:
        m = aggregate(trace, config)
    except MetricsError:
        return csv_row(config, "no-completions", None, trace.peak_memory)
    return csv_row(config, "ok", m)


def _load(path: str, overrides, seed: int | None) -> dict:
    doc = apply_overrides(load_document(path), overrides)
    if seed is not None:
        doc = apply_overrides(doc, [f"sim.seed={seed}"])
    return doc


def cmd_run(args) -> int:
    config = build_config(_load(args.config, args.set, args.seed))
    row = execute(config, args.trace_out)
    _write_rows([row], args.out, append=True)
    if row["status"] == "oom":
        raise CliError(EXIT_OOM, "oom",
                       f"{config.memory_mode.value} needs {row['peak_mem_bytes']} bytes, "
                       f"capacity {_num(config.device.mem_capacity)}")
    return EXIT_OK


@dataclass(frozen=True)
class SweepSpec:
    r_values: tuple[int, ...]
    policies: tuple[PolicyKind, ...]
    workload_preset: str
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.r_values or any(r < 1 for r in self.r_values):
            raise ConfigError("r_values must be non-empty and each >= 1")
        if not self.policies or not self.seeds:
            raise ConfigError("sweep needs at least one policy and one seed")
        object.__setattr__(self, "policies", tuple(PolicyKind.parse(p) for p in self.policies))

    def cells(self):
        for p in sorted(self.policies, key=lambda k: k.value):
            for r in sorted(self.r_values):
                for s in sorted(self.seeds):
                    yield p, r, s


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"2,4,8"``, ``"2-120"`` or a mix such as ``"1,10-12"``."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse integer list {text!r}") from None
    return tuple(out)


def _sweep_cell(job):
    doc, policy, r, seed = job
    doc = apply_overrides(doc, [f"policy.kind={policy.value}", f"tenants.count={r}", f"sim.seed={seed}"])
    try:
        config = build_config(doc)
    except ConfigError:
        return {**dict.fromkeys(CSV_COLUMNS, ""), "schema_version": SCHEMA_VERSION,
                "workload": doc["tenants"]["preset"], "policy": policy.value, "replicas": r,
                "seed": seed, "status": "config-error"}
    return execute(config)


def run_sweep(spec: SweepSpec, doc: dict, jobs: int = 1) -> list[dict]:
    doc = apply_overrides(doc, [f"tenants.preset={spec.workload_preset}"])
    doc.setdefault("policy", {})["kind"] = spec.policies[0].value
    build_config(doc)  # fail fast on a broken base config
    work = [(doc, p, r, s) for p, r, s in spec.cells()]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, work))
    else:
        rows = [_sweep_cell(w) for w in work]
    return sorted(rows, key=lambda r: (r["workload"], r["policy"], int(r["replicas"]), int(r["seed"])))


def cmd_sweep(args) -> int:
    doc = _load(args.config, args.set, None) if args.config else {}
    workload = args.workload or doc.get("tenants", {}).get("preset")
    if not workload:
        raise ConfigError("sweep needs --workload or tenants.preset")
    doc.setdefault("tenants", {})
    policies = tuple(p for p in args.policies.split(",") if p)
    try:
        spec = SweepSpec(parse_int_list(args.replicas), policies, workload,
                         parse_int_list(args.seeds) if args.seed is None else (args.seed,))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    jobs = args.jobs or os.cpu_count() or 1
    _write_rows(run_sweep(spec, doc, jobs), args.out, append=False)
    return EXIT_OK


# -- reports -----------------------------------------------------------------

def read_rows(path: str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            if tuple(reader.fieldnames) != CSV_COLUMNS:
                raise ConfigError(f"{path}: unexpected CSV header")
            return list(reader)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None


def _ok(rows):
    return [r for r in rows if r["status"] == "ok"]


def render_table(header, body) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in row] for row in body]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _mean_by(rows, key, value):
    acc = defaultdict(list)
    for r in rows:
        acc[key(r)].append(float(r[value]))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def report_table1(rows) -> tuple[list, list]:
    ok = _ok(rows)
    tput = _mean_by(ok, lambda r: (r["workload"], int(r["replicas"]), PolicyKind.parse(r["policy"])),
                    "throughput_gflops")
    workloads = sorted({r["workload"] for r in rows})
    header = ["row"] + workloads
    body = {"R = 10": [], "R = 20": [], "geomean": [], "next best": []}
    missing = []
    for w in workloads:
        rs = sorted({r for (ww, r, _p) in tput if ww == w and r >= 2})
        try:
            table = speedup_table(tput, w, rs)
        except MetricsError as e:
            missing.append(str(e))
            continue
        for label, r in (("R = 10", 10), ("R = 20", 20)):
            body[label].append(f"{table.ratio_at(r):.2f}" if r in rs else "-")
        body["geomean"].append(f"{table.geomean:.2f}")
        body["next best"].append(table.next_best)
    if missing:
        raise ConfigError("; ".join(missing))
    return header, [[k] + v for k, v in body.items()]


def _by_policy(rows, value):
    ok = _ok(rows)
    vals = _mean_by(ok, lambda r: (r["workload"], int(r["replicas"]), r["policy"]), value)
    policies = sorted({p for (_w, _r, p) in vals})
    keys = sorted({(w, r) for (w, r, _p) in vals})
    body = [[w, r] + [_num(vals[(w, r, p)]) if (w, r, p) in vals else "-" for p in policies]
            for w, r in keys]
    return ["workload", "replicas"] + policies, body


def report_fig4(rows):
    ok = _ok(rows)
    keys = sorted({(r["workload"], r["policy"], int(r["replicas"])) for r in ok})
    body = []
    for k in keys:
        cell = [r for r in ok if (r["workload"], r["policy"], int(r["replicas"])) == k]
        gaps = [float(r["fairness_gap"]) for r in cell]
        body.append([*k, len(cell), _num(sum(gaps) / len(gaps)), _num(max(gaps)),
                     _num(sum(float(r["p50_ms"]) for r in cell) / len(cell)),
                     _num(sum(float(r["p99_ms"]) for r in cell) / len(cell))])
    return ["workload", "policy", "replicas", "seeds", "mean_gap", "max_gap", "p50_ms", "p99_ms"], body


def build_report(rows, kind: str):
    if not rows:
        raise ConfigError("report needs a non-empty CSV")
    if kind == "table1":
        return report_table1(rows)
    if kind == "fig3":
        return _by_policy(rows, "mean_ms")
    if kind == "fig4":
        return report_fig4(rows)
    if kind == "fig6":
        return _by_policy(rows, "throughput_gflops")
    raise ConfigError(f"unknown report {kind!r}; expected one of {', '.join(REPORTS)}")


def cmd_report(args) -> int:
    header, body = build_report(read_rows(args.csv), args.kind)
    sys.stdout.write(render_table(header, body))
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibrate import calibrate, load_targets

    spec = load_targets(args.targets)
    free = tuple(p for p in args.free.split(",") if p) if args.free else spec.free_params
    result = calibrate(spec, free_params=free, budget=args.budget, log=sys.stderr)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(json.dumps(result.device.to_dict(), indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    if not result.met:
        worst = max(result.errors, key=result.errors.get)
        raise CliError(EXIT_CALIBRATION, "calibration-not-met",
                       f"worst target {worst} at normalized error {result.errors[worst]:.3f}")
    return EXIT_OK


def cmd_presets(args) -> int:
    body = [[p.name, len(p.layers), _num(p.weights_bytes), _num(p.slo_latency), p.description]
            for p in sorted(PRESETS.values(), key=lambda p: p.name)]
    sys.stdout.write(render_table(["name", "layers", "weights_bytes", "slo_s", "description"], body))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"config-error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gpushare", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("config", help="JSON run configuration")
        else:
            p.add_argument("config", nargs="?", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. sim.seed=7 (repeatable)")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--out", help="CSV output path (default stdout)")

    p = sub.add_parser("run", help="run one simulation and emit a CSV row")
    common(p)
    p.add_argument("--trace-out", help="write the event trace as NDJSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a (policy, R, seed) grid")
    common(p, config_required=False)
    p.add_argument("--workload", help="preset name (overrides tenants.preset)")
    p.add_argument("--replicas", default="2-120", help="R values, e.g. 2-120 or 2,10,20")
    p.add_argument("--policies", default="time-mux,space-implicit,space-explicit,space-time")
    p.add_argument("--seeds", default="0", help="seed list, e.g. 0-19")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default: CPU count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a table from sweep CSV")
    p.add_argument("csv")
    p.add_argument("--kind", choices=REPORTS, default="table1")
    p.add_argument("--csv-out", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("calibrate", help="fit device knobs to target metrics")
    p.add_argument("targets", help="targets JSON")
    p.add_argument("--free", help="comma-separated DeviceSpec fields to fit")
    p.add_argument("--budget", type=int, default=60, help="maximum metric evaluations")
    p.add_argument("--out", help="write the fitted profile JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("presets", help="list workload presets")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"{e.reason}: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config-error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - last-resort boundary
        print(f"internal-error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
