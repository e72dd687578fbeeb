"""Synthetic moving-square videos and strided clip sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

DEFAULT_CLASSES = (
    {"direction": "left", "speed": 1, "pattern": "square"},
    {"direction": "left", "speed": 2, "pattern": "square"},
    {"direction": "right", "speed": 1, "pattern": "square"},
    {"direction": "right", "speed": 2, "pattern": "square"},
)
_DIRECTIONS = {"left": -1, "right": 1}


@dataclass
class SyntheticSpec:
    """A square of side ``square`` crossing a dark field, wrapping at the border.

    Classes differ by direction and per-frame displacement; ``per_class`` is one
    count for all classes or a list with one entry per class.
    """

    classes: list[dict[str, Any]] = field(default_factory=lambda: [dict(c) for c in DEFAULT_CLASSES])
    channels: int = 3
    frames: int = 16
    height: int = 16
    width: int = 16
    square: int = 4
    per_class: int | list[int] = 8
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a synthetic task needs at least two classes")
        for c in self.classes:
            if c.get("direction") not in _DIRECTIONS:
                raise ValueError(f"unknown direction in class {c}")
            if c.get("pattern", "square") != "square":
                raise ValueError(f"unsupported pattern {c.get('pattern')!r}")
        if isinstance(self.per_class, list) and len(self.per_class) != len(self.classes):
            raise ValueError("per_class list must have one count per class")
        if self.square > min(self.height, self.width):
            raise ValueError("square does not fit in the frame")

    def counts(self) -> list[int]:
        if isinstance(self.per_class, list):
            return list(self.per_class)
        return [int(self.per_class)] * len(self.classes)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SyntheticSpec":
        return cls(**d)


def render_clip(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    cls = spec.classes[label]
    step = _DIRECTIONS[cls["direction"]] * int(cls.get("speed", 1))
    x0 = int(rng.integers(0, spec.width))
    y0 = int(rng.integers(0, spec.height - spec.square + 1))
    video = np.zeros((spec.channels, spec.frames, spec.height, spec.width))
    cols = np.arange(spec.square)
    for t in range(spec.frames):
        xs = (x0 + step * t + cols) % spec.width
        video[:, t, y0:y0 + spec.square, xs] = 1.0
    if spec.noise > 0:
        video += rng.uniform(-spec.noise, spec.noise, size=video.shape)
    return video


def gen_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Videos ``(N, C, T, H, W)`` and integer labels; sample i of class k depends only on (seed, k, i)."""
    videos, labels = [], []
    for label, count in enumerate(spec.counts()):
        for i in range(count):
            rng = np.random.default_rng([spec.seed, label, i])
            videos.append(render_clip(spec, label, rng))
            labels.append(label)
    shape = (0, spec.channels, spec.frames, spec.height, spec.width)
    return (np.stack(videos) if videos else np.zeros(shape)), np.asarray(labels, dtype=np.int64)


def clip_span(length: int, stride: int) -> int:
    return (length - 1) * stride + 1


def sample_clip(video: np.ndarray, length: int, stride: int = 1, rng: np.random.Generator | None = None,
                start: int | None = None) -> np.ndarray:
    """Take ``length`` frames ``stride`` apart from a ``C x T x H x W`` video.

    The start frame is drawn uniformly from the valid range with ``rng``; with
    neither ``rng`` nor ``start`` the centred clip is returned.
    """
    if stride < 1:
        raise ValueError(f"temporal stride must be >= 1, got {stride}")
    total = video.shape[1]
    span = clip_span(length, stride)
    if total < span:
        raise ValueError(f"video has {total} frames; a {length}-frame clip at stride {stride} needs {span}")
    if start is None:
        start = int(rng.integers(0, total - span + 1)) if rng is not None else (total - span) // 2
    elif not 0 <= start <= total - span:
        raise ValueError(f"start {start} outside valid range [0, {total - span}]")
    return video[:, start:start + span:stride]
