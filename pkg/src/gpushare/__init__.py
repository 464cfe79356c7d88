"""Simulator for multi-tenant GPU inference: cost model, sharing policies,
space-time super-kernel scheduling, and a deterministic event engine."""

from .cost_model import DeviceSpec, GemmShape, OutOfMemory, load_profile
from .engine import SimConfig, Trace, analytic_oracle, inject_degradation, run
from .experiments import make_config
from .metrics import aggregate, geomean, slowdown_vs_exclusive, speedup_table
from .policies import PolicyKind, PolicyParams
from .scheduler import BatchPolicy, DetectorParams
from .workload import PRESETS, Tenant, get_preset

__all__ = [
    "BatchPolicy", "DetectorParams", "DeviceSpec", "GemmShape", "OutOfMemory", "PRESETS",
    "PolicyKind", "PolicyParams", "SimConfig", "Tenant", "Trace", "aggregate",
    "analytic_oracle", "geomean", "get_preset", "inject_degradation", "load_profile", "make_config", "run",
    "slowdown_vs_exclusive", "speedup_table",
]
