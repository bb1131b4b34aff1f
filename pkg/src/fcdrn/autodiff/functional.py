"""Forward operators with their gradient rules."""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, make_result


def _as_rng(rng: Union[None, int, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * x.dtype.type(factor), (x,), lambda g: (g * factor,), "scale")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat of an empty list")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat needs identical N, H, W; got {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, tuple(xs), _backward, "concat")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2, return_indices: bool = False):
    """2x2 / stride-2 max pooling; a trailing odd row or column is dropped."""
    if kernel != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ValueError(f"spatial size {h}x{w} smaller than pooling kernel")
    ho, wo = h // 2, w // 2
    win = x.data[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, : 2 * ho, : 2 * wo] = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (gx,)

    res = make_result(np.ascontiguousarray(out), (x,), _backward, "maxpool2d")
    return (res, idx) if return_indices else res


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resize; output pixel (y, x) copies input (y*H//th, x*W//tw)."""
    n, c, h, w = x.shape
    if target_h < h or target_w < w:
        raise ValueError(f"upsample target {target_h}x{target_w} smaller than input {h}x{w}")
    if (target_h, target_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    ri = _nearest_index(h, target_h)
    ci = _nearest_index(w, target_w)
    out = x.data[:, :, ri][:, :, :, ci]
    # each input row/col is hit by a contiguous run of output rows/cols
    r_start = np.searchsorted(ri, np.arange(h))
    c_start = np.searchsorted(ci, np.arange(w))

    def _backward(g):
        g = np.add.reduceat(g, r_start, axis=2)
        return (np.add.reduceat(g, c_start, axis=3),)

    return make_result(out, (x,), _backward, "upsample")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In train mode the batch mean and biased variance over (N, H, W) normalise
    the input, and the running statistics are updated in place (the running
    variance uses the unbiased estimate).  Eval mode uses the running values.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have length {c}")
    xd = x.data
    gshape = (1, c, 1, 1)
    if train:
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(gshape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd.reshape(gshape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / max(m - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(gshape)) * invstd.reshape(gshape)
    invstd = invstd.astype(xd.dtype, copy=False)
    xhat = xhat.astype(xd.dtype, copy=False)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def _backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(gshape)
        if train:
            m = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(gshape)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
            dx = (invstd.reshape(gshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * invstd.reshape(gshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), _backward, "batchnorm")


def dropout(
    x: Tensor,
    p: float,
    train: bool,
    rng: Union[None, int, np.random.Generator] = None,
    channelwise: bool = False,
) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return make_result(x.data, (x,), lambda g: (g,), "dropout")
    gen = _as_rng(rng)
    shape = x.shape[:2] + (1, 1) if channelwise else x.shape
    keep = gen.random(shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def one_hot(labels: np.ndarray, num_classes: int, void_index: Optional[int] = None) -> np.ndarray:
    """(N, H, W) integer labels to (N, K, H, W) one-hot; void pixels become all-zero."""
    labels = np.asarray(labels)
    valid = labels != void_index if void_index is not None else np.ones(labels.shape, bool)
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= num_classes):
        raise ValueError("label outside [0, K) that is not the void index")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float32)
    safe = np.where(valid, labels, 0)
    np.put_along_axis(out, safe[:, None], 1.0, axis=1)
    out *= valid[:, None]
    return out


def softmax_cross_entropy(
    logits: Tensor,
    target: Union[np.ndarray, Tensor],
    void_index: Optional[int] = None,
) -> Tensor:
    """Mean per-pixel cross-entropy over non-void pixels.

    ``target`` is either an (N, H, W) integer label map or an (N, K, H, W)
    array of (soft) target probabilities.  For soft targets a pixel whose
    target vector is all zero is treated as void.
    """
    z = logits.data
    n, k, h, w = z.shape
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    prob = np.exp(logp)

    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 3:
        if t.shape != (n, h, w):
            raise ValueError(f"label map shape {t.shape} does not match logits {z.shape}")
        valid = t != void_index if void_index is not None else np.ones(t.shape, bool)
        bad = valid & ((t < 0) | (t >= k))
        if bad.any():
            raise ValueError(f"label value {int(t[bad][0])} outside [0, {k}) and not void")
        soft = one_hot(t, k, void_index).astype(z.dtype)
    elif t.shape == z.shape:
        soft = t.astype(z.dtype, copy=False)
        valid = soft.sum(axis=1) > 0
    else:
        raise ValueError(f"target shape {t.shape} incompatible with logits {z.shape}")

    count = int(valid.sum())
    if count == 0:
        return make_result(np.asarray(0.0, dtype=z.dtype), (logits,), lambda g: (np.zeros_like(z),), "xent")
    loss = -(soft * logp).sum() / count
    tsum = soft.sum(axis=1, keepdims=True)

    def _backward(g):
        return ((prob * tsum - soft) * (g / count),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), _backward, "xent")
