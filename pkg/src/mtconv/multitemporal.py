"""Multi-temporal convolution: a local 3D conv branch plus a prolonged branch.

The prolonged branch sees both the local-branch output and the layer input at
half the spatial and temporal resolution, convolves each, adds them and
resamples back, so its kernels cover twice the duration at an eighth of the
cost per output channel.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import ops
from .ops import BatchNormStats, conv3d_output_shape
from .pooling import (
    choose_frames,
    gather_frames,
    pool3d,
    pool_spatial,
    softpool3d,
    softpool_spatial,
)
from .tensor import ParamScope, ParamStore, Tensor

REDUCTIONS = ("softpool_cos", "avg_cos", "softpool", "avg", "max", "stochastic")


class ConfigError(ValueError):
    pass


@dataclass
class RunContext:
    """Per-forward switches: BN mode, running-stat buffers, RNG for stochastic pooling."""

    training: bool = True
    buffers: dict[str, BatchNormStats] | None = None
    rng: np.random.Generator | None = None

    def stats(self, path: str, channels: int) -> BatchNormStats | None:
        if self.buffers is None:
            return None
        if path not in self.buffers:
            self.buffers[path] = BatchNormStats.fresh(channels)
        return self.buffers[path]


def split_channels(out_channels: int, delta: float) -> tuple[int, int]:
    """Local/prolonged channel counts: floor(delta*C) and the ceiling of the rest."""
    if out_channels < 1:
        raise ConfigError(f"output channels must be >= 1, got {out_channels}")
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"channel ratio must lie in (0, 1], got {delta}"
                          + (" (a zero ratio removes the branch the prolonged path depends on)" if delta == 0 else ""))
    # 1e-9 absorbs representation error in delta (0.7 * 10 -> 7.000000000000001)
    c_local = math.floor(delta * out_channels + 1e-9)
    c_prolonged = math.ceil((1.0 - delta) * out_channels - 1e-9)
    if c_local + c_prolonged != out_channels:
        c_prolonged = out_channels - c_local
    return c_local, c_prolonged


@dataclass
class MTConvConfig:
    in_channels: int
    out_channels: int
    delta: float = 0.875
    k_local: tuple[int, int, int] = (3, 3, 3)
    k_prolonged: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    reduction: str = "softpool_cos"

    def __post_init__(self):
        self.k_local = tuple(int(k) for k in self.k_local)
        self.k_prolonged = tuple(int(k) for k in self.k_prolonged)
        self.stride = tuple(int(s) for s in self.stride)
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")
        c_local, _ = split_channels(self.out_channels, self.delta)
        if c_local < 1:
            raise ConfigError(f"delta={self.delta} leaves no local channels out of {self.out_channels}")
        for k in self.k_local + self.k_prolonged:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if min(self.stride) < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")

    @property
    def channels(self) -> tuple[int, int]:
        return split_channels(self.out_channels, self.delta)

    @property
    def padding_local(self) -> tuple[int, int, int]:
        return tuple(k // 2 for k in self.k_local)  # type: ignore[return-value]

    @property
    def padding_prolonged(self) -> tuple[int, int, int]:
        return tuple(k // 2 for k in self.k_prolonged)  # type: ignore[return-value]

    def output_thw(self, in_thw) -> tuple[int, int, int]:
        return conv3d_output_shape(in_thw, self.k_local, self.stride, self.padding_local)

    def prolonged_thw(self, in_thw) -> tuple[int, int, int]:
        """Resolution the prolonged convs run at (half the output resolution)."""
        return tuple(n // 2 for n in self.output_thw(in_thw))  # type: ignore[return-value]

    def validate(self, in_thw) -> tuple[int, int, int]:
        """Check the prolonged path lines up for this input size; returns output T, H, W."""
        out = self.output_thw(in_thw)
        if min(out) < 1:
            raise ConfigError(f"input {tuple(in_thw)} too small for kernel {self.k_local}")
        if self.channels[1] == 0:
            return out
        for name, n_in, n_out in zip("THW", in_thw, out):
            if n_in % 2 or n_out % 2:
                raise ConfigError(f"prolonged branch needs even {name}: input {n_in}, output {n_out}")
        via_input = conv3d_output_shape([n // 2 for n in in_thw], self.k_prolonged, self.stride,
                                        self.padding_prolonged)
        if tuple(via_input) != self.prolonged_thw(in_thw):
            raise ConfigError(f"prolonged pathways disagree for input {tuple(in_thw)}: "
                              f"{tuple(via_input)} vs {self.prolonged_thw(in_thw)}")
        return out

    def to_json(self) -> dict[str, Any]:
        return {"in": self.in_channels, "out": self.out_channels, "delta": self.delta,
                "k_local": list(self.k_local), "k_prolonged": list(self.k_prolonged),
                "stride": list(self.stride), "reduction": self.reduction}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "MTConvConfig":
        return cls(in_channels=d["in"], out_channels=d["out"], delta=d.get("delta", 0.875),
                   k_local=tuple(d.get("k_local", (3, 3, 3))), k_prolonged=tuple(d.get("k_prolonged", (3, 3, 3))),
                   stride=tuple(d.get("stride", (1, 1, 1))), reduction=d.get("reduction", "softpool_cos"))


def _he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_conv_bn(scope: ParamScope, c_in: int, c_out: int, kernel, rng: np.random.Generator) -> None:
    scope.add("weight", _he_normal(rng, (c_out, c_in, *kernel)))
    scope.add("bn.gamma", np.ones(c_out))
    scope.add("bn.beta", np.zeros(c_out))


def init_mtconv(scope: ParamScope, config: MTConvConfig, rng: np.random.Generator) -> None:
    """Register weights: ``local.*``, and when the prolonged branch exists ``lp.*`` and ``p.*``."""
    c_local, c_prolonged = config.channels
    init_conv_bn(scope.scope("local"), config.in_channels, c_local, config.k_local, rng)
    if c_prolonged:
        init_conv_bn(scope.scope("lp"), c_local, c_prolonged, config.k_prolonged, rng)
        init_conv_bn(scope.scope("p"), config.in_channels, c_prolonged, config.k_prolonged, rng)


def conv_bn(x: Tensor, params: ParamScope, stride, padding, ctx: RunContext, relu: bool = True) -> Tensor:
    w = params["weight"]
    z = ops.conv3d(x, w, None, stride=stride, padding=padding)
    z = ops.batch_norm3d(z, params["bn.gamma"], params["bn.beta"],
                         ctx.stats(f"{params.prefix}.bn", w.shape[0]), training=ctx.training)
    return ops.relu(z) if relu else z


def reduce_volume(x: Tensor, method: str = "softpool_cos", ctx: RunContext | None = None) -> Tensor:
    """Halve T, H and W of a prolonged-branch input.

    ``*_cos`` methods pool each frame spatially and then keep the T/2 least
    redundant frames; the others pool symmetrically with a 2x2x2 window.
    """
    ctx = ctx or RunContext()
    if method in ("softpool_cos", "avg_cos"):
        pooled = softpool_spatial(x) if method == "softpool_cos" else pool_spatial(x, "avg")
        if pooled.ndim == 5:
            sel = [choose_frames(pooled.data[n]) for n in range(pooled.shape[0])]
        else:
            sel = choose_frames(pooled.data)
        return gather_frames(pooled, sel)
    if method == "softpool":
        return softpool3d(x, (2, 2, 2))
    if method in ("avg", "max", "stochastic"):
        return pool3d(x, method, (2, 2, 2), training=ctx.training, rng=ctx.rng)
    raise ConfigError(f"unknown reduction {method!r}")


def local_branch(a: Tensor, params: ParamScope, config: MTConvConfig, ctx: RunContext | None = None) -> Tensor:
    ctx = ctx or RunContext()
    c = a.shape[-4]
    if c != config.in_channels:
        raise ops.DimensionError(f"local branch: input has {c} channels, config expects {config.in_channels}")
    return conv_bn(a, params.scope("local"), config.stride, config.padding_local, ctx)


def prolonged_branch(a_local: Tensor, a_in: Tensor, params: ParamScope, config: MTConvConfig,
                     ctx: RunContext | None = None) -> Tensor:
    ctx = ctx or RunContext()
    out_thw = tuple(a_local.shape[-3:])
    half = tuple(n // 2 for n in out_thw)
    from_local = reduce_volume(a_local, config.reduction, ctx)
    from_input = reduce_volume(a_in, config.reduction, ctx)
    assert tuple(from_local.shape[-3:]) == half, (from_local.shape, half)
    z_lp = conv_bn(from_local, params.scope("lp"), 1, config.padding_prolonged, ctx)
    z_p = conv_bn(from_input, params.scope("p"), config.stride, config.padding_prolonged, ctx)
    assert z_lp.shape == z_p.shape, (z_lp.shape, z_p.shape)
    return ops.trilinear_interp(z_lp + z_p, out_thw)


def mtconv_forward(a: Tensor, params: ParamScope, config: MTConvConfig, ctx: RunContext | None = None) -> Tensor:
    """Local output channels first, prolonged channels after them."""
    ctx = ctx or RunContext()
    local = local_branch(a, params, config, ctx)
    if config.channels[1] == 0:
        return local
    return ops.concat_channels(local, prolonged_branch(local, a, params, config, ctx))


def build_mtconv(config: MTConvConfig, seed: int = 0, prefix: str = "mtconv") -> ParamStore:
    store = ParamStore()
    init_mtconv(store.scope(prefix), config, np.random.default_rng(seed))
    return store
