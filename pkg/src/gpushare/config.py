"""JSON run configuration with sections ``device``, ``policy``, ``scheduler``,
``tenants`` and ``sim``, plus dotted-path overrides such as ``sim.seed=7``.

Example::

    {
      "device": {"profile": "v100"},
      "policy": {"kind": "space-time"},
      "scheduler": {"max_wait": 0.001},
      "tenants": {"preset": "resnet18-conv2_2", "count": 10},
      "sim": {"seed": 0, "rounds": 40}
    }

``sim.duration`` may be omitted; the run length is then sized to ``rounds``
estimated closed-loop cycles.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

from .cost_model import DeviceSpec, load_profile
from .engine import ConfigError, Degradation, SimConfig
from .experiments import estimate_cycle
from .policies import PolicyKind, PolicyParams
from .scheduler import BatchPolicy, DetectorParams
from .workload import get_preset

SECTIONS = ("device", "policy", "scheduler", "tenants", "sim")
_POLICY_KEYS = {"kind"} | {f.name for f in dataclasses.fields(PolicyParams)} - {"rng_seed"}
_BATCH_KEYS = {f.name for f in dataclasses.fields(BatchPolicy)}
_DETECTOR_KEYS = {f.name for f in dataclasses.fields(DetectorParams)}
_TENANT_KEYS = {"preset", "count", "concurrency", "slo_latency", "activation_bytes"}
_SIM_KEYS = {"duration", "warmup", "seed", "mode", "rounds", "degradations"}
_DEVICE_KEYS = {"profile"} | {f.name for f in dataclasses.fields(DeviceSpec)}


def _check_keys(section: str, data: dict, allowed: set) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    for k in data:
        if k not in allowed:
            raise ConfigError(f"unknown config key {section}.{k}")


def parse_value(text: str):
    """Override values are JSON when they parse as JSON, else plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Return a copy of ``doc`` with ``section.key=value`` assignments applied."""
    out = copy.deepcopy(doc)
    for item in overrides or ():
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not of the form a.b=value")
        keys = path.split(".")
        if keys[0] not in SECTIONS:
            raise ConfigError(f"unknown config key {path}")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"unknown config key {path}")
        node[keys[-1]] = parse_value(raw)
    return out


def load_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def build_device(section: dict) -> DeviceSpec:
    _check_keys("device", section, _DEVICE_KEYS)
    fields = dict(section)
    try:
        base = load_profile(fields.pop("profile", "v100"))
        return base.replace(**fields)
    except (FileNotFoundError, KeyError) as e:
        raise ConfigError(f"device: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"device: {e}") from None


def build_config(doc: dict) -> SimConfig:
    """Validate a configuration document and turn it into a :class:`SimConfig`.
    Errors name the offending key."""
    for k in doc:
        if k not in SECTIONS:
            raise ConfigError(f"unknown config key {k}")
    device = build_device(doc.get("device", {}))

    pol = dict(doc.get("policy", {}))
    _check_keys("policy", pol, _POLICY_KEYS)
    if "kind" not in pol:
        raise ConfigError("missing config key policy.kind")
    try:
        kind = PolicyKind.parse(pol.pop("kind"))
    except ValueError as e:
        raise ConfigError(f"policy.kind: {e}") from None

    sched = dict(doc.get("scheduler", {}))
    _check_keys("scheduler", sched, _BATCH_KEYS | _DETECTOR_KEYS)
    ten = dict(doc.get("tenants", {}))
    _check_keys("tenants", ten, _TENANT_KEYS)
    sim = dict(doc.get("sim", {}))
    _check_keys("sim", sim, _SIM_KEYS)

    seed = sim.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("sim.seed must be an integer")
    try:
        params = PolicyParams(**pol, rng_seed=seed)
        batch = BatchPolicy(**{k: v for k, v in sched.items() if k in _BATCH_KEYS})
        detector = DetectorParams(**{k: v for k, v in sched.items() if k in _DETECTOR_KEYS})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"policy/scheduler: {e}") from None

    if "preset" not in ten:
        raise ConfigError("missing config key tenants.preset")
    try:
        preset = get_preset(ten["preset"])
    except KeyError as e:
        raise ConfigError(f"tenants.preset: {e.args[0]}") from None
    try:
        tenants = preset.tenants(
            count=int(ten.get("count", 1)),
            concurrency=int(ten.get("concurrency", 1)),
            activation_bytes=float(ten.get("activation_bytes", 0.0)),
            slo_latency=ten.get("slo_latency"),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"tenants: {e}") from None
    if not tenants:
        raise ConfigError("tenants.count must be >= 1")

    mode = sim.get("mode", "microbench" if len(preset.layers) == 1 else "forward_pass")
    duration = sim.get("duration")
    if duration is None:
        rounds = sim.get("rounds", 40)
        if not isinstance(rounds, (int, float)) or rounds <= 0:
            raise ConfigError("sim.rounds must be > 0")
        switch = 0.0 if mode == "microbench" else None
        cycle = estimate_cycle(kind, preset.layers, len(tenants), device, params, batch, switch)
        duration = rounds * cycle / 0.9
    degradations = []
    for i, d in enumerate(sim.get("degradations", [])):
        try:
            degradations.append(Degradation(int(d["tenant"]), float(d["slowdown"]), float(d.get("start", 0.0))))
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"sim.degradations[{i}] needs tenant and slowdown") from None
    try:
        return SimConfig(
            device=device, policy=kind, tenants=tuple(tenants), policy_params=params,
            scheduler=batch, detector=detector, duration=float(duration),
            warmup=sim.get("warmup"), seed=seed, mode=mode, workload=preset.name,
            degradations=tuple(degradations),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sim: {e}") from None


def load_config(path, overrides=()) -> SimConfig:
    return build_config(apply_overrides(load_document(path), overrides))
