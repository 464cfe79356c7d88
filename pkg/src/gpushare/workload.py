"""Tenants and named workload presets.

Network presets lower every convolution to its im2col GEMM at batch 1
(224x224 input). Depthwise convolutions are charged as a single GEMM with
``n = channels`` and ``k = 9``, which keeps the FLOP count exact.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cost_model import ConvSpec, GemmShape, gemm_flops, im2col_gemm_dims


@dataclass(frozen=True)
class Tenant:
    tenant_id: int
    layers: tuple[GemmShape, ...]
    weights_bytes: float = 0.0
    activation_bytes: float = 0.0
    slo_latency: float = 0.1
    concurrency: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("tenant needs at least one layer")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if not self.slo_latency > 0:
            raise ValueError("slo_latency must be > 0")

    @property
    def pass_flops(self) -> int:
        return sum(gemm_flops(s) for s in self.layers)


@dataclass(frozen=True)
class WorkloadPreset:
    name: str
    layers: tuple[GemmShape, ...]
    weights_bytes: float
    slo_latency: float
    description: str = ""

    def tenants(self, count: int, concurrency: int = 1, activation_bytes: float = 0.0,
                slo_latency: float | None = None) -> list[Tenant]:
        slo = self.slo_latency if slo_latency is None else slo_latency
        return [
            Tenant(i, self.layers, self.weights_bytes, activation_bytes, slo, concurrency)
            for i in range(count)
        ]


def _conv(res, k, cin, cout, stride, pad):
    spec = ConvSpec(res, res, k, k, cin, cout, stride, pad)
    return im2col_gemm_dims(spec), spec.out_h


def resnet50_layers(res: int = 224) -> tuple[GemmShape, ...]:
    layers = []
    g, h = _conv(res, 7, 3, 64, 2, 3)
    layers.append(g)
    h = (h + 2 - 3) // 2 + 1  # 3x3/2 max pool
    cin = 64
    for width, blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        out = 4 * width
        for b in range(blocks):
            s = stride if b == 0 else 1
            layers.append(_conv(h, 1, cin, width, 1, 0)[0])
            g, h2 = _conv(h, 3, width, width, s, 1)
            layers.append(g)
            layers.append(_conv(h2, 1, width, out, 1, 0)[0])
            if b == 0:
                layers.append(_conv(h, 1, cin, out, s, 0)[0])
            h, cin = h2, out
    layers.append(GemmShape(1, 1000, 2048))
    return tuple(layers)


def mobilenetv2_layers(res: int = 224) -> tuple[GemmShape, ...]:
    layers = []
    g, h = _conv(res, 3, 3, 32, 2, 1)
    layers.append(g)
    cin = 32
    for t, c, n, s in ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                       (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)):
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = cin * t
            if t != 1:
                layers.append(_conv(h, 1, cin, hidden, 1, 0)[0])
            h = (h + 2 - 3) // stride + 1
            layers.append(GemmShape(h * h, hidden, 9))
            layers.append(_conv(h, 1, hidden, c, 1, 0)[0])
            cin = c
    layers.append(_conv(h, 1, cin, 1280, 1, 0)[0])
    layers.append(GemmShape(1, 1000, 1280))
    return tuple(layers)


# Table-style microbenchmark shapes; single kernels with no weights to speak of.
RNN_MATVEC = GemmShape(512, 1, 512)
RESNET18_CONV2_2 = GemmShape(256, 128, 1152)
SQUARE_256 = GemmShape(256, 256, 256)

PRESETS: dict[str, WorkloadPreset] = {}


def register(preset: WorkloadPreset) -> WorkloadPreset:
    if preset.name in PRESETS:
        raise ValueError(f"duplicate preset {preset.name!r}")
    PRESETS[preset.name] = preset
    return preset


register(WorkloadPreset("rnn-matvec", (RNN_MATVEC,), 4 * 512 * 512, 0.01,
                        "RNN matrix-vector product, M=512 N=1 K=512"))
register(WorkloadPreset("resnet18-conv2_2", (RESNET18_CONV2_2,), 4 * 128 * 1152, 0.01,
                        "ResNet-18 conv2_2 as im2col SGEMM, M=256 N=128 K=1152"))
register(WorkloadPreset("square-256", (SQUARE_256,), 4 * 256 * 256, 0.01,
                        "square SGEMM, M=N=K=256"))
register(WorkloadPreset("resnet50", resnet50_layers(), 102.4e6, 0.1,
                        "ResNet-50, 224x224, 54 GEMM layers, 25.6M fp32 parameters"))
register(WorkloadPreset("mobilenetv2", mobilenetv2_layers(), 14.0e6, 0.1,
                        "MobileNetV2, 224x224, 53 GEMM layers, 3.5M fp32 parameters"))


def get_preset(name: str) -> WorkloadPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown workload preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
