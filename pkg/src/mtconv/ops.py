"""Differentiable primitives over :class:`~mtconv.tensor.Tensor`.

Volume ops take either an unbatched ``C x T x H x W`` tensor or a batched
``N x C x T x H x W`` one; the channel axis is ``ndim - 4`` in both cases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, send


class DimensionError(ValueError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _volume(x: Tensor, op: str) -> bool:
    """Return True if ``x`` is batched; reject anything that is not 4-D/5-D."""
    if x.ndim == 5:
        return True
    if x.ndim == 4:
        return False
    raise DimensionError(f"{op}: expected C x T x H x W (optionally batched), got shape {x.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, grads):
        send(grads, a, _unbroadcast(g, a.shape))
        send(grads, b, _unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, grads):
        send(grads, a, _unbroadcast(g, a.shape))
        send(grads, b, _unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, grads):
        if a.requires_grad:
            send(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            send(grads, b, _unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g, grads):
        if a.requires_grad:
            send(grads, a, g @ b.data.T)
        if b.requires_grad:
            send(grads, b, a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g, grads):
        if x.requires_grad:
            send(grads, x, g @ weight.data)
        if weight.requires_grad:
            send(grads, weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            send(grads, bias, g.sum(axis=0))

    return Tensor._make(out, parents, backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g, grads):
        send(grads, x, g.reshape(src))

    return Tensor._make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g, grads):
        send(grads, x, np.ascontiguousarray(g.transpose(inv)))

    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def index(x: Tensor, idx) -> Tensor:
    def backward(g, grads):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        send(grads, x, full)

    return Tensor._make(np.array(x.data[idx]), (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        send(grads, x, np.broadcast_to(g, x.shape).copy())

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref):
            raise DimensionError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax, (p, q) in enumerate(zip(ref, other)):
            if ax != axis % len(ref) and p != q:
                raise DimensionError(f"concat: axis {ax} differs ({p} vs {q})")
    bounds = np.cumsum([0] + sizes)

    def backward(g, grads):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                send(grads, t, np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g, grads):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                send(grads, t, np.ascontiguousarray(np.take(g, i, axis=axis)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s; every other axis must agree."""
    _volume(a, "concat_channels")
    if a.ndim != b.ndim:
        raise DimensionError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=a.ndim - 4)


# -- activations -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g, grads):
        send(grads, x, g * mask)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g, grads):
        send(grads, x, g * s * (1.0 - s))

    return Tensor._make(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g, grads):
        send(grads, x, g * (1.0 - t * t))

    return Tensor._make(t, (x,), backward)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


# -- convolution -----------------------------------------------------------

def conv3d_output_shape(in_thw, kernel, stride=1, padding=0) -> tuple[int, int, int]:
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_thw, kernel, stride, padding))  # type: ignore[return-value]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation (no kernel flip) via im2col + one matrix product."""
    batched = _volume(x, "conv3d")
    xd = x.data if batched else x.data[None]
    stride, padding = _triple(stride), _triple(padding)
    if weight.ndim != 5:
        raise DimensionError(f"conv3d: weight must be C_out x C_in x Kt x Kh x Kw, got {weight.shape}")
    n, c, *thw = xd.shape
    o, c_w, *ksz = weight.shape
    if c != c_w:
        raise DimensionError(f"conv3d: channel axis mismatch, input has {c} channels but weight expects {c_w}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} does not match {o} output channels")
    for name, size, k, p, s in zip("THW", thw, ksz, padding, stride):
        if s < 1:
            raise DimensionError(f"conv3d: stride on axis {name} must be >= 1")
        if k > size + 2 * p:
            raise DimensionError(f"conv3d: kernel {k} exceeds padded input {size + 2 * p} on axis {name}")
    out_thw = conv3d_output_shape(thw, ksz, stride, padding)
    pt, ph, pw = padding
    st, sh, sw = stride
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else xd
    win = sliding_window_view(xp, tuple(ksz), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    ncols = c * int(np.prod(ksz))
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(-1, ncols)
    wmat = weight.data.reshape(o, ncols)
    out = (cols @ wmat.T).reshape(n, *out_thw, o).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, grads):
        g5 = g if batched else g[None]
        gmat = g5.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        if weight.requires_grad:
            send(grads, weight, (gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            send(grads, bias, g5.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, *out_thw, c, *ksz)
            gxp = np.zeros(xp.shape)
            to, ho, wo = out_thw
            for i in range(ksz[0]):
                for j in range(ksz[1]):
                    for k in range(ksz[2]):
                        gxp[:, :, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                            gcols[:, :, :, :, :, i, j, k].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, pt:pt + thw[0], ph:ph + thw[1], pw:pw + thw[2]]
            send(grads, x, np.ascontiguousarray(gx if batched else gx[0]))

    return Tensor._make(out, parents, backward)


# -- batch normalization ---------------------------------------------------

@dataclass
class BatchNormStats:
    """Running per-channel moments; updated as ``m * old + (1 - m) * batch``."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batch_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: BatchNormStats | None = None,
                 training: bool = True, eps: float = 1e-5) -> Tensor:
    batched = _volume(x, "batch_norm3d")
    xd = x.data if batched else x.data[None]
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm3d: gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    count = xd.size // c
    if training or running_stats is None:
        mu = xd.mean(axis=axes)
        centered = xd - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if training and running_stats is not None:
            m = running_stats.momentum
            unbiased = var * count / (count - 1) if count > 1 else var
            running_stats.mean = m * running_stats.mean + (1.0 - m) * mu
            running_stats.var = m * running_stats.var + (1.0 - m) * unbiased
        use_batch = True
    else:
        centered = xd - running_stats.mean.reshape(bshape)
        var = running_stats.var
        use_batch = False
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if not batched:
        out = out[0]

    def backward(g, grads):
        g5 = g if batched else g[None]
        if gamma.requires_grad:
            send(grads, gamma, (g5 * xhat).sum(axis=axes))
        if beta.requires_grad:
            send(grads, beta, g5.sum(axis=axes))
        if x.requires_grad:
            dxhat = g5 * gamma.data.reshape(bshape)
            if use_batch:
                s1 = dxhat.mean(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).mean(axis=axes).reshape(bshape)
                gx = (dxhat - s1 - xhat * s2) * inv_std.reshape(bshape)
            else:
                gx = dxhat * inv_std.reshape(bshape)
            send(grads, x, gx if batched else gx[0])

    return Tensor._make(out, (x, gamma, beta), backward)


# -- interpolation ---------------------------------------------------------

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear resampling matrix (n_out x n_in), align-corners=False with edge clamping."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i0 < n_in - 1 else 0.0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _apply_along(v: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, v, axes=([1], [axis])), 0, axis)


def trilinear_interp(x: Tensor, target) -> Tensor:
    """Resample the trailing T, H, W axes to ``target`` with separable linear weights."""
    _volume(x, "trilinear_interp")
    target = _triple(target)
    if min(target) < 1:
        raise DimensionError(f"trilinear_interp: target dims must be >= 1, got {target}")
    src = x.shape[-3:]
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    mats = [interp_matrix(s, t) for s, t in zip(src, target)]
    out = x.data
    for ax, m in zip(axes, mats):
        if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
            out = _apply_along(out, m, ax)

    def backward(g, grads):
        for ax, m in zip(axes, mats):
            g = _apply_along(g, m.T, ax)
        send(grads, x, np.ascontiguousarray(g))

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


# -- loss -------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g, grads):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        send(grads, logits, g * p / n)

    return Tensor._make(np.asarray(loss), (logits,), backward)
