"""SGD with momentum, cosine learning-rate decay with linear warm-up, and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import ops
from .checkpoint import atomic_write, save_checkpoint
from .data import sample_clip
from .network import Network
from .tensor import ParamStore, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.1
    epochs: int = 30
    n_max: int | None = None          # total iterations; derived from epochs when unset
    warmup_iters: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 8
    seed: int = 0
    clip_len: int = 8
    temporal_stride: int = 1

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.temporal_stride < 1:
            raise ValueError(f"temporal stride must be >= 1, got {self.temporal_stride}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.n_max is not None and not 0 <= self.warmup_iters < self.n_max:
            raise ValueError(f"need 0 <= warmup_iters < n_max, got {self.warmup_iters} / {self.n_max}")

    def total_iters(self, n_samples: int) -> int:
        if self.n_max is not None:
            return self.n_max
        return max(1, self.epochs * math.ceil(n_samples / self.batch_size))

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**d)


def cosine_lr(n: float, config: TrainConfig, n_max: int | None = None) -> float:
    """``lr0 * 0.5 * (cos(pi * n / n_max) + 1)``, with a linear warm-up.

    The cosine always runs over the full ``[0, n_max]`` horizon. During the
    first ``warmup_iters`` iterations the rate ramps linearly from 0 to the
    cosine value at the end of warm-up, so the schedule is continuous there.
    """
    n_max = config.n_max if n_max is None else n_max
    if n_max is None:
        raise ValueError("cosine_lr needs n_max")
    if not 0 <= n <= n_max:
        raise ValueError(f"iteration {n} outside [0, {n_max}]")

    def cosine(k: float) -> float:
        return config.lr0 * 0.5 * (math.cos(math.pi * k / n_max) + 1.0)

    w = config.warmup_iters
    if n < w:
        return cosine(w) * n / w
    return cosine(n)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
             velocity: dict[str, np.ndarray], rate: float, momentum: float = 0.9,
             weight_decay: float = 5e-5) -> None:
    """In place: ``v = momentum*v + grad + weight_decay*param``; ``param -= rate*v``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        velocity[name] = v
        p -= rate * v


def sgd_update(store: ParamStore, velocity: dict[str, np.ndarray], rate: float, config: TrainConfig) -> None:
    sgd_step({k: t.data for k, t in store.items()}, {k: t.grad for k, t in store.items()},
             velocity, rate, config.momentum, config.weight_decay)


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    history: list[HistoryRow] = field(default_factory=list)
    params: ParamStore | None = None

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), repr(r.val_acc)])
        return buf.getvalue()


def evaluate(network: Network, videos: np.ndarray, labels: np.ndarray, config: TrainConfig,
             batch_size: int = 32) -> float:
    """Accuracy on centred clips in inference mode."""
    if len(labels) == 0:
        return float("nan")
    correct = 0
    with no_grad():
        for lo in range(0, len(labels), batch_size):
            clips = np.stack([sample_clip(v, config.clip_len, config.temporal_stride)
                              for v in videos[lo:lo + batch_size]])
            logits = network.forward(Tensor(clips), training=False).data
            correct += int((logits.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / len(labels)


def train_loop(network: Network, dataset: tuple[np.ndarray, np.ndarray], config: TrainConfig,
               val: tuple[np.ndarray, np.ndarray] | None = None, out_dir=None,
               stop_at_train_acc: float | None = None) -> TrainResult:
    """Train with cross-entropy; one history row per epoch.

    ``stop_at_train_acc`` ends training after the first epoch whose train
    accuracy reaches it (the schedule still spans all configured epochs).
    With ``out_dir`` set, a divergence (non-finite loss, or non-finite
    parameters after an update) writes the last finite parameters to
    ``out_dir/diverged.mtn`` before raising ``TrainingDiverged``.
    """
    videos, labels = dataset
    if len(labels) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    n_max = config.total_iters(len(labels))
    store = network.params
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult(params=store)
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            clips = np.stack([sample_clip(videos[i], config.clip_len, config.temporal_stride, rng) for i in idx])
            snapshot = store.state()
            store.zero_grad()
            logits = network.forward(Tensor(clips), training=True, rng=rng)
            loss = ops.cross_entropy(logits, labels[idx])
            problem = None if np.isfinite(loss.item()) else "non-finite loss"
            if problem is None:
                loss.backward()
                sgd_update(store, velocity, cosine_lr(min(it, n_max), config, n_max), config)
                bad = next((p for p, t in store.items() if not np.isfinite(t.data).all()), None)
                if bad is not None:
                    problem = f"non-finite parameter {bad!r} after update"
            if problem is not None:
                path = None
                if out_dir is not None:
                    path = str(Path(out_dir) / "diverged.mtn")
                    save_checkpoint(snapshot, path)
                raise TrainingDiverged(f"{problem} at epoch {epoch}, iteration {it}", path)
            losses.append(loss.item())
            it += 1
        train_acc = evaluate(network, videos, labels, config)
        val_acc = evaluate(network, *val, config) if val is not None else float("nan")
        row = HistoryRow(epoch, float(np.mean(losses)), train_acc, val_acc)
        log.info("epoch %d loss %.4f train %.3f val %.3f", row.epoch, row.loss, row.train_acc, row.val_acc)
        result.history.append(row)
        if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
            break
    return result


def write_history(result: TrainResult, path) -> None:
    atomic_write(path, result.history_csv())
