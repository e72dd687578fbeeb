"""Spatial pooling and similarity-driven temporal frame selection.

The prolonged branch halves its inputs in two steps: a per-frame softmax-weighted
pooling over space, then keeping the half of the frames that are least similar
to their temporal neighbours.
"""
from __future__ import annotations

import contextvars
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ops import DimensionError, _volume
from .tensor import Tensor, send


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _windows(xd: np.ndarray, kernel, stride) -> np.ndarray:
    """View of shape (..., To, Ho, Wo, kt*kh*kw) over the trailing three axes."""
    win = sliding_window_view(xd, tuple(kernel), axis=(-3, -2, -1))
    st, sh, sw = stride
    win = win[..., ::st, ::sh, ::sw, :, :, :]
    return win.reshape(*win.shape[:-3], -1)


def _scatter(gwin: np.ndarray, in_shape, kernel, stride) -> np.ndarray:
    """Adjoint of ``_windows``: add per-window gradients back onto the input grid."""
    kt, kh, kw = kernel
    st, sh, sw = stride
    gwin = gwin.reshape(*gwin.shape[:-1], kt, kh, kw)
    to, ho, wo = gwin.shape[-6:-3]
    out = np.zeros(in_shape)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                out[..., i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += gwin[..., i, j, k]
    return out


def _check_kernel(shape, kernel, op):
    for name, n, k in zip("THW", shape[-3:], kernel):
        if k > n:
            raise DimensionError(f"{op}: kernel {k} larger than input size {n} on axis {name}")


def softpool3d(x: Tensor, kernel=(2, 2, 2), stride=None) -> Tensor:
    """Softmax-weighted pooling over (T, H, W) windows.

    Each window outputs ``sum_r softmax(a)_r * a_r``, evaluated as
    ``max + sum_r w_r * (a_r - max)`` so constant windows return their value
    exactly and large activations never overflow.
    """
    _volume(x, "softpool")
    kernel = tuple(int(k) for k in kernel)
    stride = kernel if stride is None else tuple(int(s) for s in stride)
    _check_kernel(x.shape, kernel, "softpool")
    win = _windows(x.data, kernel, stride)
    peak = win.max(axis=-1, keepdims=True)
    shifted = win - peak
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)
    out = peak[..., 0] + (w * shifted).sum(axis=-1)
    in_shape = x.shape

    def backward(g, grads):
        gwin = g[..., None] * w * (1.0 + win - out[..., None])
        send(grads, x, _scatter(gwin, in_shape, kernel, stride))

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def softpool_spatial(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    """SoftPool each frame independently; the temporal axis is untouched."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(kernel if stride is None else stride)
    return softpool3d(x, (1, kh, kw), (1, sh, sw))


POOL_KINDS = ("avg", "max", "stochastic")


def pool3d(x: Tensor, kind: str, kernel=(2, 2, 2), stride=None, *, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Average, max or stochastic pooling over (T, H, W) windows.

    Stochastic pooling draws one element per window with probability
    proportional to its positive part when training (``rng`` required) and
    returns the probability-weighted mean otherwise. Windows with no positive
    element fall back to uniform probabilities.
    """
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")
    _volume(x, "pool")
    kernel = tuple(int(k) for k in kernel)
    stride = kernel if stride is None else tuple(int(s) for s in stride)
    _check_kernel(x.shape, kernel, "pool")
    win = _windows(x.data, kernel, stride)
    r = win.shape[-1]
    in_shape = x.shape

    if kind == "avg":
        out = win.mean(axis=-1)
        dwin = np.full(win.shape, 1.0 / r)
    elif kind == "max" or (kind == "stochastic" and training):
        if kind == "max":
            pick = win.argmax(axis=-1)
        else:
            if rng is None:
                raise ValueError("stochastic pooling in training mode needs an rng")
            probs = _stochastic_probs(win)
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random(size=win.shape[:-1] + (1,))
            pick = np.minimum((u >= cdf).sum(axis=-1), r - 1)
        out = np.take_along_axis(win, pick[..., None], axis=-1)[..., 0]
        dwin = np.zeros(win.shape)
        np.put_along_axis(dwin, pick[..., None], 1.0, axis=-1)
    else:
        probs = _stochastic_probs(win)
        out = (probs * win).sum(axis=-1)
        pos = np.maximum(win, 0.0)
        total = pos.sum(axis=-1, keepdims=True)
        has_pos = total > 0
        # out = sum(a+^2)/sum(a+) on windows with positive mass, plain mean otherwise
        safe = np.where(has_pos, total, 1.0)
        dpos = np.where(win > 0, (2.0 * win - out[..., None]) / safe, 0.0)
        dwin = np.where(has_pos, dpos, 1.0 / r)

    def backward(g, grads):
        send(grads, x, _scatter(g[..., None] * dwin, in_shape, kernel, stride))

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def _stochastic_probs(win: np.ndarray) -> np.ndarray:
    pos = np.maximum(win, 0.0)
    total = pos.sum(axis=-1, keepdims=True)
    uniform = np.full(win.shape, 1.0 / win.shape[-1])
    return np.where(total > 0, pos / np.where(total > 0, total, 1.0), uniform)


def pool_spatial(x: Tensor, kind: str, kernel=(2, 2), stride=None, *, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(kernel if stride is None else stride)
    return pool3d(x, kind, (1, kh, kw), (1, sh, sw), training=training, rng=rng)


def spatial_sum(x: Tensor) -> Tensor:
    """Sum over H and W: ``C x T x H x W -> C x T`` (batched likewise)."""
    _volume(x, "spatial_sum")
    shape = x.shape

    def backward(g, grads):
        send(grads, x, np.broadcast_to(g[..., None, None], shape).copy())

    return Tensor._make(x.data.sum(axis=(-2, -1)), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: ``C x T x H x W -> C x T`` (batched likewise)."""
    _volume(x, "global_avg_pool")
    shape = x.shape
    n = shape[-1] * shape[-2]

    def backward(g, grads):
        send(grads, x, np.broadcast_to(g[..., None, None] / n, shape).copy())

    return Tensor._make(x.data.mean(axis=(-2, -1)), (x,), backward)


# -- triplet cosine frame selection ------------------------------------------

@dataclass
class FrameSelection:
    indices: list[int]
    scores: list[float]
    odd_length: bool = False

    def to_json_lines(self) -> list[dict]:
        chosen = set(self.indices)
        return [{"frame": t, "score": s, "selected": t in chosen} for t, s in enumerate(self.scores)]


def adjacent_cosine(framevecs) -> np.ndarray:
    """Cosine similarity between consecutive frame vectors of a ``C x T`` array.

    A pair involving an all-zero frame vector scores 0.
    """
    v = framevecs.data if isinstance(framevecs, Tensor) else np.asarray(framevecs, dtype=np.float64)
    if v.ndim != 2:
        raise DimensionError(f"adjacent_cosine: expected C x T frame vectors, got shape {v.shape}")
    if v.shape[1] < 2:
        raise ValueError("adjacent_cosine needs at least two frames")
    a, b = v[:, :-1], v[:, 1:]
    dots = (a * b).sum(axis=0)
    norms = np.sqrt((a * a).sum(axis=0)) * np.sqrt((b * b).sum(axis=0))
    sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.clip(sims, -1.0, 1.0)


def triplet_scores(similarities) -> np.ndarray:
    """Per-frame score: similarity to the previous plus to the next frame.

    End frames have a single neighbour, so their one similarity counts twice.
    """
    s = np.asarray(similarities, dtype=np.float64)
    t = s.size + 1
    scores = np.empty(t)
    scores[0] = 2.0 * s[0]
    scores[-1] = 2.0 * s[-1]
    if t > 2:
        scores[1:-1] = s[:-1] + s[1:]
    return scores


def triplet_select(similarities, T: int) -> FrameSelection:
    """Keep the ``T // 2`` lowest-scoring frames (ties to the lower index), in temporal order."""
    if T < 2:
        raise ValueError(f"frame selection needs T >= 2, got T={T}")
    s = np.asarray(similarities, dtype=np.float64)
    if s.size != T - 1:
        raise DimensionError(f"triplet_select: expected {T - 1} similarities for T={T}, got {s.size}")
    scores = triplet_scores(s)
    keep = np.sort(np.argsort(scores, kind="stable")[: T // 2])
    odd = T % 2 == 1
    if odd:
        warnings.warn(f"frame selection on odd T={T} keeps {T // 2} frames", RuntimeWarning, stacklevel=2)
    return FrameSelection([int(i) for i in keep], [float(v) for v in scores], odd)


def select_frames(volume) -> FrameSelection:
    """Frame selection for one unbatched ``C x T x H x W`` volume."""
    v = volume.data if isinstance(volume, Tensor) else np.asarray(volume, dtype=np.float64)
    if v.ndim != 4:
        raise DimensionError(f"select_frames: expected C x T x H x W, got shape {v.shape}")
    return triplet_select(adjacent_cosine(v.sum(axis=(-2, -1))), v.shape[1])


def gather_frames(x: Tensor, sel) -> Tensor:
    """Copy the selected frames (temporal axis) in order.

    ``sel`` is a FrameSelection or index list for an unbatched input, or one per
    batch item. Unselected frames receive zero gradient.
    """
    batched = _volume(x, "gather_frames")
    t = x.shape[-3]
    if batched:
        rows = [s.indices if isinstance(s, FrameSelection) else list(s) for s in sel]
        if len(rows) != x.shape[0]:
            raise DimensionError(f"gather_frames: {len(rows)} selections for batch of {x.shape[0]}")
    else:
        rows = [sel.indices if isinstance(sel, FrameSelection) else list(sel)]
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise IndexError(f"gather_frames: frame index out of range for T={t}: {rows}")
    xd = x.data if batched else x.data[None]
    take = idx[:, None, :, None, None]
    out = np.take_along_axis(xd, take, axis=2)

    def backward(g, grads):
        g5 = g if batched else g[None]
        full = np.zeros(xd.shape)
        np.add.at(full, (np.arange(xd.shape[0])[:, None, None], np.arange(xd.shape[1])[None, :, None],
                         idx[:, None, :]), g5)
        send(grads, x, full if batched else full[0])

    return Tensor._make(out if batched else out[0], (x,), backward)


# -- freezing selections for finite-difference checks ------------------------

class SelectionTape:
    """Records frame selections on the first pass and replays them afterwards."""

    def __init__(self):
        self.entries: list[FrameSelection] = []
        self.cursor = 0

    def next(self, compute: Callable[[], FrameSelection]) -> FrameSelection:
        if self.cursor < len(self.entries):
            sel = self.entries[self.cursor]
        else:
            sel = compute()
            self.entries.append(sel)
        self.cursor += 1
        return sel


_active_tape: contextvars.ContextVar[SelectionTape | None] = contextvars.ContextVar("selection_tape", default=None)


def choose_frames(volume: np.ndarray) -> FrameSelection:
    """Select frames for one volume, honouring an active frozen-selection tape."""
    tape = _active_tape.get()
    if tape is None:
        return select_frames(volume)
    return tape.next(lambda: select_frames(volume))


def freeze_selections(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
    """Wrap ``fn`` so every call reuses the frame indices chosen on its first call."""
    tape = SelectionTape()

    def wrapped(*args, **kwargs):
        tape.cursor = 0
        token = _active_tape.set(tape)
        try:
            return fn(*args, **kwargs)
        finally:
            _active_tape.reset(token)

    wrapped.tape = tape  # type: ignore[attr-defined]
    return wrapped
