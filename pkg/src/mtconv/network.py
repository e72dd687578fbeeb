"""Residual MTBlocks with recurrent channel-time gating, and a small classifier built from them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import ops
from .multitemporal import (
    ConfigError,
    MTConvConfig,
    RunContext,
    conv_bn,
    init_conv_bn,
    init_mtconv,
    mtconv_forward,
)
from .ops import BatchNormStats, conv3d_output_shape
from .pooling import global_avg_pool
from .recurrent import CellParams, init_cell, run_dual_layer
from .tensor import ParamScope, ParamStore, Tensor, no_grad


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(x) for x in v)  # type: ignore[return-value]


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    delta: float = 0.875
    cell: str = "gru"
    stride: tuple[int, int, int] = (1, 1, 1)
    projection: bool | None = None
    gate_squash: str = "sigmoid"      # "sigmoid" | "none"
    gate_source: str = "trunk"        # sequence pooled from the trunk output or the block input
    k_local: tuple[int, int, int] = (3, 3, 3)
    k_prolonged: tuple[int, int, int] = (3, 3, 3)
    reduction: str = "softpool_cos"

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.k_local = _triple(self.k_local)
        self.k_prolonged = _triple(self.k_prolonged)
        needs_proj = self.in_channels != self.out_channels or self.stride != (1, 1, 1)
        if self.projection is None:
            self.projection = needs_proj
        elif needs_proj and not self.projection:
            raise ConfigError("residual projection is required when channels or stride change")
        if self.gate_squash not in ("sigmoid", "none"):
            raise ConfigError(f"gate_squash must be 'sigmoid' or 'none', got {self.gate_squash!r}")
        if self.gate_source not in ("trunk", "input"):
            raise ConfigError(f"gate_source must be 'trunk' or 'input', got {self.gate_source!r}")

    def mtconvs(self) -> list[MTConvConfig]:
        kw = dict(delta=self.delta, k_local=self.k_local, k_prolonged=self.k_prolonged, reduction=self.reduction)
        return [MTConvConfig(self.in_channels, self.out_channels, stride=self.stride, **kw),
                MTConvConfig(self.out_channels, self.out_channels, **kw),
                MTConvConfig(self.out_channels, self.out_channels, **kw)]

    @property
    def gate_input_channels(self) -> int:
        return self.in_channels if self.gate_source == "input" else self.out_channels

    def to_json(self) -> dict[str, Any]:
        return {"in": self.in_channels, "out": self.out_channels, "delta": self.delta, "cell": self.cell,
                "stride": list(self.stride), "projection": self.projection, "gate_squash": self.gate_squash,
                "gate_source": self.gate_source, "k_local": list(self.k_local),
                "k_prolonged": list(self.k_prolonged), "reduction": self.reduction}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "BlockConfig":
        return cls(in_channels=d["in"], out_channels=d["out"], delta=d.get("delta", 0.875),
                   cell=d.get("cell", "gru"), stride=d.get("stride", (1, 1, 1)), projection=d.get("projection"),
                   gate_squash=d.get("gate_squash", "sigmoid"), gate_source=d.get("gate_source", "trunk"),
                   k_local=d.get("k_local", (3, 3, 3)), k_prolonged=d.get("k_prolonged", (3, 3, 3)),
                   reduction=d.get("reduction", "softpool_cos"))


@dataclass
class StemConfig:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.kernel = _triple(self.kernel)
        self.stride = _triple(self.stride)

    @property
    def padding(self) -> tuple[int, int, int]:
        return tuple(k // 2 for k in self.kernel)  # type: ignore[return-value]


@dataclass
class NetworkConfig:
    input_shape: tuple[int, int, int, int]
    stem: StemConfig
    blocks: list[BlockConfig]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)  # type: ignore[assignment]
        if len(self.input_shape) != 4:
            raise ConfigError(f"input shape must be (C, T, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    def with_delta(self, delta: float) -> "NetworkConfig":
        blocks = [BlockConfig.from_json({**b.to_json(), "delta": delta}) for b in self.blocks]
        return NetworkConfig(self.input_shape, self.stem, blocks, self.num_classes)

    def shape_chain(self) -> list[tuple[int, int, int, int]]:
        """Activation shapes after the stem and after every block; raises on the first bad stage."""
        c, *thw = self.input_shape
        thw = conv3d_output_shape(thw, self.stem.kernel, self.stem.stride, self.stem.padding)
        if min(thw) < 1:
            raise ConfigError(f"stem: input {self.input_shape} too small")
        shapes = [(self.stem.out_channels, *thw)]
        c = self.stem.out_channels
        for i, block in enumerate(self.blocks):
            if block.in_channels != c:
                raise ConfigError(f"stage {i}: expects {block.in_channels} input channels, previous stage gives {c}")
            try:
                for mt in block.mtconvs():
                    thw = mt.validate(thw)
            except ConfigError as exc:
                raise ConfigError(f"stage {i}: {exc}") from None
            if block.gate_source == "input" and shapes[-1][1] != thw[0]:
                raise ConfigError(f"stage {i}: input-sourced gating needs temporal stride 1")
            c = block.out_channels
            shapes.append((c, *thw))
        return shapes

    def to_json(self) -> dict[str, Any]:
        return {"input": list(self.input_shape),
                "stem": {"out": self.stem.out_channels, "kernel": list(self.stem.kernel),
                         "stride": list(self.stem.stride)},
                "blocks": [b.to_json() for b in self.blocks], "num_classes": self.num_classes}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "NetworkConfig":
        try:
            stem = d["stem"]
            return cls(tuple(d["input"]),
                       StemConfig(stem["out"], stem.get("kernel", (3, 3, 3)), stem.get("stride", (1, 1, 1))),
                       [BlockConfig.from_json(b) for b in d["blocks"]], int(d["num_classes"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network config: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# -- block -------------------------------------------------------------------

def global_importance(a: Tensor, params: tuple[CellParams, CellParams], kind: str, *,
                      source: Tensor | None = None, squash: str = "sigmoid") -> Tensor:
    """Gate ``a`` by a per-channel, per-frame map from a two-layer recurrence.

    The recurrence reads the spatially averaged ``source`` (``a`` itself by
    default) frame by frame; its outputs, squashed into (0, 1), are broadcast
    over H x W and multiplied into ``a``.
    """
    seq = global_avg_pool(a if source is None else source)
    hidden = run_dual_layer(kind, seq, params)
    if hidden.shape != a.shape[:-2]:
        raise ops.DimensionError(f"gate map {hidden.shape} does not match activations {a.shape[:-2]}")
    gate = ops.sigmoid(hidden) if squash == "sigmoid" else hidden
    return a * ops.reshape(gate, (*gate.shape, 1, 1))


def init_block(scope: ParamScope, config: BlockConfig, rng: np.random.Generator) -> None:
    for j, mt in enumerate(config.mtconvs(), start=1):
        init_mtconv(scope.scope(f"conv{j}"), mt, rng)
    c = config.out_channels
    init_cell(scope.scope("sr.layer1"), config.cell, c, config.gate_input_channels, rng)
    init_cell(scope.scope("sr.layer2"), config.cell, c, c, rng)
    if config.projection:
        init_conv_bn(scope.scope("proj"), config.in_channels, c, (1, 1, 1), rng)


def block_cells(params: ParamScope, config: BlockConfig) -> tuple[CellParams, CellParams]:
    c = config.out_channels
    return (CellParams.from_scope(params.scope("sr.layer1"), config.cell, c, config.gate_input_channels),
            CellParams.from_scope(params.scope("sr.layer2"), config.cell, c, c))


def mtblock_forward(a: Tensor, params: ParamScope, config: BlockConfig, ctx: RunContext | None = None) -> Tensor:
    """Three MTConvs, recurrent gating of their output, residual add, ReLU."""
    ctx = ctx or RunContext()
    trunk = a
    for j, mt in enumerate(config.mtconvs(), start=1):
        trunk = mtconv_forward(trunk, params.scope(f"conv{j}"), mt, ctx)
    gated = global_importance(trunk, block_cells(params, config), config.cell,
                              source=a if config.gate_source == "input" else None, squash=config.gate_squash)
    if config.projection:
        skip = conv_bn(a, params.scope("proj"), config.stride, 0, ctx, relu=False)
    else:
        skip = a
    return ops.relu(gated + skip)


# -- network -------------------------------------------------------------------

class Network:
    """Parameters, BN running statistics and the forward pass of one classifier."""

    def __init__(self, config: NetworkConfig, params: ParamStore, buffers: dict[str, BatchNormStats] | None = None):
        self.config = config
        self.params = params
        self.buffers: dict[str, BatchNormStats] = {} if buffers is None else buffers

    def forward(self, clip: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        single = clip.ndim == 4
        if tuple(clip.shape[-4:]) != tuple(self.config.input_shape):
            raise ops.DimensionError(f"clip shape {clip.shape[-4:]} != configured {self.config.input_shape}")
        x = ops.reshape(clip, (1, *clip.shape)) if single else clip
        ctx = RunContext(training=training, buffers=self.buffers, rng=rng)
        stem = self.config.stem
        x = conv_bn(x, self.params.scope("stem"), stem.stride, stem.padding, ctx)
        for i, block in enumerate(self.config.blocks):
            x = mtblock_forward(x, self.params.scope(f"block{i}"), block, ctx)
        pooled = ops.mean(x, axis=(2, 3, 4))
        logits = ops.linear(pooled, self.params["head.weight"], self.params["head.bias"])
        return ops.reshape(logits, (-1,)) if single else logits

    __call__ = forward

    def buffer_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for path in sorted(self.buffers):
            out[f"{path}.mean"] = self.buffers[path].mean
            out[f"{path}.var"] = self.buffers[path].var
        return out

    def load_buffer_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, value in arrays.items():
            path, which = key.rsplit(".", 1)
            stats = self.buffers.setdefault(path, BatchNormStats.fresh(value.shape[0]))
            setattr(stats, which, np.array(value, dtype=np.float64))


def build_network(config: NetworkConfig, seed: int = 0) -> tuple[ParamStore, Network]:
    config.shape_chain()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_conv_bn(store.scope("stem"), config.input_shape[0], config.stem.out_channels, config.stem.kernel, rng)
    for i, block in enumerate(config.blocks):
        init_block(store.scope(f"block{i}"), block, rng)
    c = config.blocks[-1].out_channels if config.blocks else config.stem.out_channels
    bound = 1.0 / np.sqrt(c)
    store.add("head.weight", rng.uniform(-bound, bound, size=(config.num_classes, c)))
    store.add("head.bias", np.zeros(config.num_classes))
    return store, Network(config, store)


def forward_logits(network: Network, clip: Tensor) -> Tensor:
    """Inference-mode logits for one ``C x T x H x W`` clip (or a batch)."""
    with no_grad():
        return network.forward(clip, training=False)


# -- multi-view inference --------------------------------------------------------

@dataclass
class MultiviewResult:
    predicted: int
    probabilities: np.ndarray
    views: list[tuple[int, int, int]] = field(default_factory=list)   # (start frame, top, left)
    fallback: bool = False


def view_grid(video_shape, clip_shape, n_clips: int, n_crops: int, temporal_stride: int = 1):
    """Evenly spaced (start, top, left) views; crops run along the longer spatial side."""
    _, t_full, h_full, w_full = video_shape
    _, t, h, w = clip_shape
    if h_full < h or w_full < w:
        raise ops.DimensionError(f"video frames {h_full}x{w_full} smaller than clip {h}x{w}")
    span = (t - 1) * temporal_stride + 1
    if t_full < span:
        return [((t_full - span) // 2, (h_full - h) // 2, (w_full - w) // 2)], True
    starts = np.linspace(0, t_full - span, n_clips).round().astype(int)
    offsets = np.linspace(0, (w_full - w) if w_full >= h_full else (h_full - h), n_crops).round().astype(int)
    views = []
    for s in starts:
        for o in offsets:
            if w_full >= h_full:
                views.append((int(s), (h_full - h) // 2, int(o)))
            else:
                views.append((int(s), int(o), (w_full - w) // 2))
    return views, False


def extract_view(video: np.ndarray, clip_shape, view, temporal_stride: int = 1) -> np.ndarray:
    _, t, h, w = clip_shape
    start, top, left = view
    frames = np.clip(start + temporal_stride * np.arange(t), 0, video.shape[1] - 1)
    return video[:, frames, top:top + h, left:left + w]


def multiview_infer(network: Network, video, n_clips: int = 10, n_crops: int = 3,
                    temporal_stride: int = 1) -> MultiviewResult:
    """Average softmax probabilities over a clips x crops grid of views.

    A video shorter than one clip falls back to a single centred view whose
    out-of-range frames are clamped to the ends; ``fallback`` is set.
    """
    v = video.data if isinstance(video, Tensor) else np.asarray(video, dtype=np.float64)
    clip_shape = network.config.input_shape
    views, fallback = view_grid(v.shape, clip_shape, n_clips, n_crops, temporal_stride)
    batch = np.stack([extract_view(v, clip_shape, view, temporal_stride) for view in views])
    logits = forward_logits(network, Tensor(batch)).data
    probs = ops.softmax(logits, axis=1).mean(axis=0)
    return MultiviewResult(int(np.argmax(probs)), probs, views, fallback)
