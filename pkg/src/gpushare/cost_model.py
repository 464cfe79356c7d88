"""Analytic GPU cost model.

Kernels are single-precision GEMMs tiled into thread blocks. A device exposes
``sm_count * blocks_per_sm`` concurrent block slots; blocks run in full waves
over the slots they are allowed to occupy. Duration follows a roofline:

    duration = launches * launch_overhead
               + max(compute_time, bytes / mem_bandwidth)

where compute time is charged per wave: every block does ``flops / blocks``
work at ``peak_flops / slot_total`` per slot. With the full slot budget this is
``flops / (peak_flops * parallel_efficiency)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

ELEMENT_SIZE = 4


@dataclass(frozen=True, order=True)
class GemmShape:
    m: int
    n: int
    k: int

    def __post_init__(self):
        for name in ("m", "n", "k"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"GemmShape.{name} must be a positive int, got {v!r}")

    def __str__(self):
        return f"{self.m}x{self.n}x{self.k}"


@dataclass(frozen=True)
class ConvSpec:
    image_h: int
    image_w: int
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            low = 0 if f.name == "padding" else 1
            if not isinstance(v, int) or v < low:
                raise ValueError(f"ConvSpec.{f.name} must be an int >= {low}, got {v!r}")

    @property
    def out_h(self) -> int:
        return (self.image_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.image_w + 2 * self.padding - self.kernel_w) // self.stride + 1


@dataclass(frozen=True)
class DeviceSpec:
    """Parameterized GPU.

    The defaults are the nominal V100 numbers with every calibration knob at
    its neutral value. The fitted profile ships as ``profiles/v100.json``
    (see :func:`load_profile`).

    Fields beyond peak throughput and memory capacity are calibration
    parameters, not datasheet values:

    - ``space_sched_penalty``: multiplier on rounds arbitrated by the device
      across concurrent streams.
    - ``launch_serialization``: share of each stream's launch overhead that
      serializes when streams run concurrently.
    - ``batch_setup_overhead``: extra fixed cost of a multi-member batched
      launch (pointer arrays, batched argument marshaling).
    - ``batched_efficiency``: compute efficiency of a multi-member batched
      kernel relative to a single tuned GEMM.
    - ``gemm_efficiency``: sustained fraction of peak for a fully occupied
      kernel.
    """

    peak_flops: float = 14e12
    mem_bandwidth: float = 900e9
    sm_count: int = 80
    blocks_per_sm: int = 2
    launch_overhead: float = 5e-6
    context_switch_overhead: float = 1e-3
    planning_overhead: float = 50e-6
    mem_capacity: float = 16e9
    process_context_bytes: float = 800e6
    tile_m: int = 64
    tile_n: int = 64
    space_sched_penalty: float = 1.0
    launch_serialization: float = 1.0
    batch_setup_overhead: float = 0.0
    batched_efficiency: float = 1.0
    gemm_efficiency: float = 1.0

    def __post_init__(self):
        if not self.peak_flops > 0:
            raise ValueError("peak_flops must be > 0")
        if not self.mem_bandwidth > 0:
            raise ValueError("mem_bandwidth must be > 0")
        if self.sm_count < 1 or self.blocks_per_sm < 1:
            raise ValueError("sm_count and blocks_per_sm must be >= 1")
        if self.tile_m < 1 or self.tile_n < 1:
            raise ValueError("tile dimensions must be >= 1")
        for name in ("launch_overhead", "context_switch_overhead", "planning_overhead",
                     "batch_setup_overhead", "process_context_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mem_capacity <= 0:
            raise ValueError("mem_capacity must be > 0")
        if self.space_sched_penalty < 1:
            raise ValueError("space_sched_penalty must be >= 1")
        if not 0 <= self.launch_serialization <= 1:
            raise ValueError("launch_serialization must be in [0, 1]")
        for name in ("batched_efficiency", "gemm_efficiency"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")

    @property
    def slot_total(self) -> int:
        return self.sm_count * self.blocks_per_sm

    def replace(self, **changes) -> "DeviceSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise KeyError(f"unknown device field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "DeviceSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: Union[str, Path, None] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def load_profile(name_or_path: Union[str, Path] = "v100") -> DeviceSpec:
    """Load a shipped profile by name, or any profile JSON by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        return DeviceSpec.from_json(p)
    ref = resources.files("gpushare") / "profiles" / f"{name_or_path}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no device profile named {name_or_path!r}")
    return DeviceSpec.from_dict(json.loads(ref.read_text()))


@dataclass(frozen=True)
class KernelCost:
    flops: int
    bytes: int
    blocks: int
    duration: float
    waves: int
    launches: int = 1
    occupancy: float = 1.0


class SharingMode(str, Enum):
    PROCESS_PER_TENANT = "process_per_tenant"
    SHARED_CONTEXT = "shared_context"


def gemm_flops(shape: GemmShape) -> int:
    return 2 * shape.m * shape.n * shape.k


def gemm_bytes(shape: GemmShape, element_size: int = ELEMENT_SIZE) -> int:
    if element_size not in (2, 4, 8):
        raise ValueError(f"element_size must be 2, 4 or 8, got {element_size}")
    m, n, k = shape.m, shape.n, shape.k
    return element_size * (m * k + k * n + m * n)


def thread_blocks(shape: GemmShape, device: DeviceSpec) -> int:
    return -(-shape.m // device.tile_m) * -(-shape.n // device.tile_n)


def im2col_gemm_dims(conv: ConvSpec) -> GemmShape:
    oh, ow = conv.out_h, conv.out_w
    if oh < 1 or ow < 1:
        raise ValueError(f"convolution has non-positive output size {oh}x{ow}")
    return GemmShape(oh * ow, conv.out_channels, conv.kernel_h * conv.kernel_w * conv.in_channels)


def batch_inputs(shape: GemmShape, batch: int) -> GemmShape:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return GemmShape(shape.m * batch, shape.n, shape.k)


KernelList = Iterable[Union[GemmShape, tuple[GemmShape, int]]]


def _expand(kernels: KernelList) -> list[tuple[GemmShape, int]]:
    out = []
    for item in kernels:
        if isinstance(item, GemmShape):
            out.append((item, 1))
        else:
            shape, count = item
            if count < 1:
                raise ValueError("kernel multiplicity must be >= 1")
            out.append((shape, int(count)))
    return out


def dispatch_duration(
    kernels: KernelList,
    device: DeviceSpec,
    slot_budget: int | None = None,
    launches: int = 1,
    efficiency: float = 1.0,
) -> KernelCost:
    """Cost of running ``kernels`` within ``slot_budget`` block slots.

    ``kernels`` holds shapes or ``(shape, multiplicity)`` pairs. ``launches``
    counts kernel invocations; each pays ``launch_overhead``. ``efficiency``
    scales the compute side only (memory bandwidth is shared device-wide).
    """
    items = _expand(kernels)
    if not items:
        raise ValueError("empty dispatch")
    slots = device.slot_total
    budget = slots if slot_budget is None else slot_budget
    if not 1 <= budget <= slots:
        raise ValueError(f"slot_budget must be in [1, {slots}], got {budget}")
    if launches < 1:
        raise ValueError("launches must be >= 1")

    flops = sum(gemm_flops(s) * c for s, c in items)
    nbytes = sum(gemm_bytes(s) * c for s, c in items)
    blocks = sum(thread_blocks(s, device) * c for s, c in items)
    waves = -(-blocks // budget)
    rate = device.peak_flops * device.gemm_efficiency * efficiency
    compute = waves * flops * slots / (rate * blocks)
    memory = nbytes / device.mem_bandwidth
    duration = launches * device.launch_overhead + max(compute, memory)
    return KernelCost(
        flops=flops,
        bytes=nbytes,
        blocks=blocks,
        duration=duration,
        waves=waves,
        launches=launches,
        occupancy=blocks / (waves * slots),
    )


@lru_cache(maxsize=65536)
def kernel_cost(shape: GemmShape, device: DeviceSpec, slot_budget: int | None = None) -> KernelCost:
    """Memoized single-kernel :func:`dispatch_duration`."""
    return dispatch_duration([shape], device, slot_budget=slot_budget)


def parallel_efficiency(blocks: int, slot_budget: int) -> float:
    waves = -(-blocks // slot_budget)
    return blocks / (waves * slot_budget)


def memory_footprint(tenants: Sequence, mode: Union[SharingMode, str], device: DeviceSpec) -> float:
    """Device bytes needed to host ``tenants`` (anything with ``weights_bytes``
    and ``activation_bytes``) under a sharing mode."""
    mode = SharingMode(mode)
    per_tenant = sum(t.weights_bytes + t.activation_bytes for t in tenants)
    if mode is SharingMode.PROCESS_PER_TENANT:
        return len(tenants) * device.process_context_bytes + per_tenant
    return device.process_context_bytes + per_tenant


class OutOfMemory(RuntimeError):
    """A run whose footprint exceeds device memory."""

    def __init__(self, mode: SharingMode, required: float, capacity: float):
        self.mode = SharingMode(mode)
        self.required = required
        self.capacity = capacity
        super().__init__(
            f"out of device memory: {self.mode.value} needs {required:.0f} bytes, "
            f"capacity {capacity:.0f}"
        )


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)

