"""Fit device calibration knobs to target metrics by coordinate descent.

A targets file is JSON::

    {
      "profile": "v100",
      "free_params": ["space_sched_penalty", "context_switch_overhead"],
      "r_values": "2-120",
      "targets": [
        {"metric": "table1.resnet18-conv2_2.geomean", "target": 3.23, "tolerance": 0.25},
        {"metric": "table1.resnet18-conv2_2.next_best", "target": "space-only"}
      ]
    }

Numeric targets score ``|value / target - 1| / tolerance`` (met when <= 1);
label targets score 0 on a match and :data:`LABEL_MISS` otherwise. The search
minimizes the worst score.

Metric names:

- ``table1.<workload>.{geomean,r<R>,next_best}``: space-time over the best
  competitor on a microbenchmark sweep
- ``timeonly.<workload>.geomean``: space-time over time multiplexing
- ``slowdown.time-mux`` / ``slowdown.space``: forward-pass latency slowdown
  vs exclusive access (``space`` pools both spatial policies)
- ``utilization.<model>.b<batch>``: exclusive-access fraction of peak
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO

from .cost_model import DeviceSpec, load_profile
from .engine import ConfigError
from .experiments import (
    exclusive_utilization,
    microbench_sweep,
    slowdown_study,
    time_only_speedup,
)
from .metrics import geomean, speedup_table
from .policies import PolicyKind

LABEL_MISS = 10.0
UNIT_PARAMS = {"launch_serialization", "batched_efficiency", "gemm_efficiency"}


@dataclass(frozen=True)
class Target:
    metric: str
    target: float | str
    tolerance: float = 0.25

    def score(self, value) -> float:
        if isinstance(self.target, str):
            return 0.0 if value == self.target else LABEL_MISS
        return abs(value / self.target - 1.0) / self.tolerance


@dataclass(frozen=True)
class TargetsSpec:
    targets: tuple[Target, ...]
    free_params: tuple[str, ...] = ()
    profile: str = "v100"
    r_values: tuple[int, ...] = tuple(range(2, 121))
    seed: int = 0
    rounds: int = 40


def _int_list(value) -> tuple[int, ...]:
    if isinstance(value, list):
        return tuple(int(v) for v in value)
    out = []
    for part in str(value).split(","):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi or lo) + 1))
    return tuple(out)


def load_targets(path) -> TargetsSpec:
    """Read a targets file; ``builtin:<name>`` names one shipped with the package."""
    try:
        if str(path).startswith("builtin:"):
            text = resources.files("gpushare").joinpath(f"targets/{str(path)[8:]}.json").read_text()
        else:
            text = Path(path).read_text()
        doc = json.loads(text)
        targets = tuple(Target(t["metric"], t["target"], float(t.get("tolerance", 0.25)))
                        for t in doc["targets"])
        return TargetsSpec(
            targets=targets,
            free_params=tuple(doc.get("free_params", ())),
            profile=doc.get("profile", "v100"),
            r_values=_int_list(doc.get("r_values", "2-120")),
            seed=int(doc.get("seed", 0)),
            rounds=int(doc.get("rounds", 40)),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad targets file {path}: {e}") from None


def evaluate(device: DeviceSpec, spec: TargetsSpec) -> dict:
    """Compute every metric named by ``spec.targets`` on ``device``."""
    names = [t.metric for t in spec.targets]
    values: dict = {}
    sweeps: dict = {}

    def sweep(workload):
        if workload not in sweeps:
            sweeps[workload] = microbench_sweep(device, workload, spec.r_values, spec.seed, rounds=spec.rounds)
        return sweeps[workload]

    slowdowns = None
    for name in names:
        parts = name.split(".")
        if parts[0] == "table1" and len(parts) == 3:
            table = speedup_table(sweep(parts[1]), parts[1], spec.r_values)
            if parts[2] == "geomean":
                values[name] = table.geomean
            elif parts[2] == "next_best":
                values[name] = table.next_best
            elif parts[2].startswith("r"):
                values[name] = table.ratio_at(int(parts[2][1:]))
            else:
                raise ConfigError(f"unknown metric {name}")
        elif parts[0] == "timeonly" and len(parts) == 3 and parts[2] == "geomean":
            values[name] = time_only_speedup(sweep(parts[1]), parts[1], spec.r_values)
        elif parts[0] == "slowdown" and len(parts) == 2:
            if slowdowns is None:
                slowdowns = slowdown_study(device, spec.seed)
            if parts[1] == "space":
                values[name] = geomean([slowdowns[PolicyKind.SPACE_IMPLICIT],
                                        slowdowns[PolicyKind.SPACE_EXPLICIT]])
            else:
                values[name] = slowdowns[PolicyKind.parse(parts[1])]
        elif parts[0] == "utilization" and len(parts) == 3 and parts[2].startswith("b"):
            values[name] = exclusive_utilization(device, parts[1], int(parts[2][1:]))
        else:
            raise ConfigError(f"unknown metric {name}")
    return values


def score(values: dict, targets) -> dict[str, float]:
    return {t.metric: t.score(values[t.metric]) for t in targets}


@dataclass
class CalibrationResult:
    device: DeviceSpec
    values: dict
    errors: dict
    evaluations: int
    iterations: int
    history: list = field(default_factory=list)

    @property
    def met(self) -> bool:
        return all(e <= 1.0 for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def to_dict(self) -> dict:
        return {
            "met": self.met,
            "worst_error": self.worst,
            "evaluations": self.evaluations,
            "iterations": self.iterations,
            "values": self.values,
            "errors": self.errors,
            "device": self.device.to_dict(),
        }


def _step(device: DeviceSpec, name: str, factor: float) -> DeviceSpec | None:
    value = getattr(device, name)
    new = value * factor if value > 0 else (1e-6 if factor > 1 else 0.0)
    if name in UNIT_PARAMS:
        new = min(new, 1.0)
    if name == "space_sched_penalty":
        new = max(new, 1.0)
    if math.isclose(new, value):
        return None
    try:
        return device.replace(**{name: new})
    except ValueError:
        return None


def calibrate(spec: TargetsSpec, device: DeviceSpec | None = None, free_params=None,
              budget: int = 60, step: float = 0.5, min_step: float = 1e-3,
              log: IO[str] | None = None, evaluator=evaluate) -> CalibrationResult:
    """Coordinate descent on multiplicative steps of each free parameter.

    Each sweep over the parameters tries ``x * (1 + step)`` and
    ``x / (1 + step)``, keeping any move that lowers the worst score; when a
    whole sweep fails to improve, ``step`` halves. Stops when every target is
    met, the step shrinks below ``min_step``, or ``budget`` evaluations are
    spent. Deterministic for a given spec and budget.
    """
    device = device or load_profile(spec.profile)
    free = tuple(free_params if free_params is not None else spec.free_params)
    fields = set(device.to_dict())
    for name in free:
        if name not in fields:
            raise ConfigError(f"unknown device parameter {name}")

    values = evaluator(device, spec)
    errors = score(values, spec.targets)
    evals, iters = 1, 0
    history = [(device.to_dict(), max(errors.values()))]

    def say(msg):
        if log is not None:
            print(msg, file=log, flush=True)

    while free and max(errors.values()) > 1.0 and step >= min_step and evals < budget:
        iters += 1
        improved = False
        for name in free:
            for factor in (1 + step, 1 / (1 + step)):
                if evals >= budget:
                    break
                cand = _step(device, name, factor)
                if cand is None:
                    continue
                v = evaluator(cand, spec)
                e = score(v, spec.targets)
                evals += 1
                if max(e.values()) < max(errors.values()):
                    device, values, errors, improved = cand, v, e, True
                    history.append((device.to_dict(), max(errors.values())))
                    say(f"eval {evals}: {name}={getattr(device, name):.6g} worst={max(errors.values()):.4f}")
                    break
        if not improved:
            step /= 2
    return CalibrationResult(device, values, errors, evals, iters, history)
