"""Analytical FLOP and parameter counts for MTConvs, MTBlocks and networks.

Counting convention (one multiply-accumulate = 2 FLOPs):

==========================  =====================================================
conv3d                      2 * Kt*Kh*Kw * C_in * C_out * T'*H'*W'  (+1/output if bias)
batch norm                  4 per output element
relu / add / multiply       1 per output element
sigmoid                     4 per output element
softpool                    4 per window element (exp, multiply, two sums)
avg pool                    1 per window element
max pool                    1 per window element
stochastic pool             3 per window element
spatial sum / mean          1 per input element
adjacent cosine             6*C + 3 per frame pair (dot, two norms, sqrt, product, divide)
frame selection / gather    0 (routing only)
trilinear interpolation     4 per output element
recurrence                  2 * hidden * (hidden + input) * gates * T per layer
linear                      2 * in * out + out
==========================  =====================================================
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .multitemporal import MTConvConfig
from .network import BlockConfig, Network, NetworkConfig, build_network
from .ops import conv3d_output_shape
from .recurrent import CELL_GATES, cell_param_count

CONVENTION = "MAC = 2 FLOPs; BN 4/elem; relu/add/mul 1/elem; sigmoid 4/elem; softpool 4/window elem; " \
             "interp 4/elem; selection 0"


@dataclass
class LayerCost:
    name: str
    flops: int
    params: int
    output_shape: tuple[int, ...]


@dataclass
class ComplexityReport:
    records: list[LayerCost] = field(default_factory=list)
    notes: str = CONVENTION

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.records)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def add(self, name: str, flops: int, params: int, shape) -> None:
        if flops < 0 or params < 0:
            raise ValueError(f"negative count for {name}")
        self.records.append(LayerCost(name, int(flops), int(params), tuple(int(s) for s in shape)))

    def extend(self, other: "ComplexityReport") -> None:
        self.records.extend(other.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "flops", "params", "shape"])
        for r in self.records:
            w.writerow([r.name, r.flops, r.params, "x".join(map(str, r.output_shape))])
        w.writerow(["total", self.flops, self.params, ""])
        return buf.getvalue()


def _vol(shape) -> int:
    return int(np.prod(shape))


def conv3d_params(c_in: int, c_out: int, kernel, bias: bool = False) -> int:
    return c_in * c_out * _vol(kernel) + (c_out if bias else 0)


def conv3d_flops(c_in: int, c_out: int, kernel, out_thw, bias: bool = False) -> int:
    n = _vol(out_thw)
    return 2 * _vol(kernel) * c_in * c_out * n + (c_out * n if bias else 0)


def _conv_bn(report: ComplexityReport, name: str, c_in: int, c_out: int, kernel, out_thw, relu: bool = True):
    shape = (c_out, *out_thw)
    report.add(f"{name}.conv", conv3d_flops(c_in, c_out, kernel, out_thw), conv3d_params(c_in, c_out, kernel), shape)
    report.add(f"{name}.bn", 4 * _vol(shape), 2 * c_out, shape)
    if relu:
        report.add(f"{name}.relu", _vol(shape), 0, shape)


def reduction_cost(report: ComplexityReport, name: str, channels: int, thw, method: str) -> None:
    """Cost of halving a ``channels x T x H x W`` volume with the given method."""
    t, h, w = thw
    half = (t // 2, h // 2, w // 2)
    if method in ("softpool_cos", "avg_cos"):
        per = 4 if method == "softpool_cos" else 1
        pooled = (channels, t, h // 2, w // 2)
        report.add(f"{name}.spatial_pool", per * channels * t * h * w, 0, pooled)
        report.add(f"{name}.spatial_sum", _vol(pooled), 0, (channels, t))
        report.add(f"{name}.cosine", (t - 1) * (6 * channels + 3), 0, (t - 1,))
        report.add(f"{name}.select", 0, 0, (channels, *half))
    else:
        per = {"softpool": 4, "avg": 1, "max": 1, "stochastic": 3}[method]
        report.add(f"{name}.pool3d", per * channels * t * h * w, 0, (channels, *half))


def mtconv_cost(config: MTConvConfig, in_thw, name: str = "mtconv") -> ComplexityReport:
    report = ComplexityReport()
    c_local, c_prolonged = config.channels
    out_thw = config.validate(tuple(in_thw))
    _conv_bn(report, f"{name}.local", config.in_channels, c_local, config.k_local, out_thw)
    if c_prolonged:
        half = config.prolonged_thw(in_thw)
        reduction_cost(report, f"{name}.reduce_local", c_local, out_thw, config.reduction)
        reduction_cost(report, f"{name}.reduce_input", config.in_channels, in_thw, config.reduction)
        _conv_bn(report, f"{name}.lp", c_local, c_prolonged, config.k_prolonged, half)
        _conv_bn(report, f"{name}.p", config.in_channels, c_prolonged, config.k_prolonged, half)
        report.add(f"{name}.fuse", c_prolonged * _vol(half), 0, (c_prolonged, *half))
        report.add(f"{name}.interp", 4 * c_prolonged * _vol(out_thw), 0, (c_prolonged, *out_thw))
    return report


def recurrence_flops(kind: str, hidden: int, input: int, steps: int) -> int:
    return 2 * hidden * (hidden + input) * len(CELL_GATES[kind]) * steps


def block_cost(config: BlockConfig, in_thw, name: str = "block") -> ComplexityReport:
    report = ComplexityReport()
    thw = tuple(in_thw)
    for j, mt in enumerate(config.mtconvs(), start=1):
        report.extend(mtconv_cost(mt, thw, f"{name}.conv{j}"))
        thw = mt.output_thw(thw)
    c = config.out_channels
    t = thw[0]
    shape = (c, *thw)
    c_src = config.gate_input_channels
    src_vol = _vol(shape) if config.gate_source == "trunk" else config.in_channels * _vol(in_thw)
    report.add(f"{name}.sr.pool", src_vol, 0, (c_src, t))
    report.add(f"{name}.sr.layer1", recurrence_flops(config.cell, c, c_src, t),
               cell_param_count(config.cell, c, c_src), (c, t))
    report.add(f"{name}.sr.layer2", recurrence_flops(config.cell, c, c, t),
               cell_param_count(config.cell, c, c), (c, t))
    squash = 4 * c * t if config.gate_squash == "sigmoid" else 0
    report.add(f"{name}.sr.gate", squash + _vol(shape), 0, shape)
    if config.projection:
        _conv_bn(report, f"{name}.proj", config.in_channels, c, (1, 1, 1), thw, relu=False)
    report.add(f"{name}.residual", 2 * _vol(shape), 0, shape)
    return report


def count_flops(network: Network | NetworkConfig, input_shape=None) -> ComplexityReport:
    """FLOPs for one clip view; ``input_shape`` defaults to the configured clip."""
    config = network.config if isinstance(network, Network) else network
    c, *thw = input_shape if input_shape is not None else config.input_shape
    report = ComplexityReport()
    stem = config.stem
    thw = conv3d_output_shape(thw, stem.kernel, stem.stride, stem.padding)
    _conv_bn(report, "stem", c, stem.out_channels, stem.kernel, thw)
    channels = stem.out_channels
    for i, block in enumerate(config.blocks):
        report.extend(block_cost(block, thw, f"block{i}"))
        for mt in block.mtconvs():
            thw = mt.output_thw(thw)
        channels = block.out_channels
    report.add("head.pool", channels * _vol(thw), 0, (channels,))
    k = config.num_classes
    report.add("head.linear", 2 * channels * k + k, channels * k + k, (k,))
    return report


def count_params(network: Network) -> int:
    """Trainable parameter count; BN running statistics are buffers and excluded."""
    return network.params.num_elements()


@dataclass
class SweepRow:
    delta: float
    gflops: float
    flops: int
    params: int


def delta_sweep(base: NetworkConfig, deltas) -> list[SweepRow]:
    rows = []
    for d in deltas:
        cfg = base.with_delta(float(d))
        _, net = build_network(cfg, seed=0)
        report = count_flops(net)
        rows.append(SweepRow(float(d), report.gflops, report.flops, count_params(net)))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = ["delta,gflops,params"]
    lines += [f"{r.delta:g},{r.gflops:.3f},{r.params}" for r in rows]
    return "\n".join(lines) + "\n"
