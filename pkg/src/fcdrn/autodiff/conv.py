"""2-D cross-correlation via patch gather + matrix product.

Taps are gathered into a column matrix of shape (C_in * taps, N * H_out * W_out)
and multiplied by the flattened weights.  When the full column matrix would be
too large (full-resolution inference), taps are processed in groups and the
partial products accumulated, which keeps peak memory bounded without changing
the arithmetic per output element.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, is_grad_enabled, make_result

# Column-matrix budget in elements; beyond this taps are grouped.
MAX_COL_ELEMENTS = 1 << 25


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap_groups(n_taps: int, rows_per_tap: int, n_cols: int) -> list[range]:
    per_tap = rows_per_tap * n_cols
    group = max(1, min(n_taps, MAX_COL_ELEMENTS // max(per_tap, 1)))
    return [range(s, min(s + group, n_taps)) for s in range(0, n_taps, group)]


def _gather(xp: np.ndarray, taps, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    # xp: (C, N, Hp, Wp) padded input, channel-major
    c, n = xp.shape[:2]
    cols = np.empty((c, len(taps), n, ho, wo), dtype=xp.dtype)
    for t_i, t in enumerate(taps):
        i, j = divmod(t, k)
        r0, c0 = i * dilation, j * dilation
        cols[:, t_i] = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * len(taps), n * ho * wo)


def _scatter(dxp: np.ndarray, dcols: np.ndarray, taps, k: int, stride: int, dilation: int, ho: int, wo: int) -> None:
    c, n = dxp.shape[:2]
    dcols = dcols.reshape(c, len(taps), n, ho, wo)
    for t_i, t in enumerate(taps):
        i, j = divmod(t, k)
        r0, c0 = i * dilation, j * dilation
        dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dcols[:, t_i]


def _correlate(xp: np.ndarray, wd: np.ndarray, stride: int, dilation: int, ho: int, wo: int,
               keep_cols: bool) -> tuple[np.ndarray, list]:
    """Core product on a padded channel-major input (C, N, Hp, Wp) -> (C_out, N*ho*wo)."""
    cout, cin, k, _ = wd.shape
    n = xp.shape[1]
    w3 = wd.reshape(cout, cin, k * k)
    groups = _tap_groups(k * k, cin, n * ho * wo)
    keep_cols = keep_cols and len(groups) == 1
    out2d = None
    saved = []
    for taps in groups:
        cols = _gather(xp, taps, k, stride, dilation, ho, wo)
        wg = w3[:, :, taps.start : taps.stop].reshape(cout, -1)
        part = wg @ cols
        out2d = part if out2d is None else out2d + part
        if keep_cols:
            saved.append(cols)
    return out2d, saved


def _pad_cm(x: np.ndarray, p: int) -> np.ndarray:
    """N-major array to padded channel-major (C, N, H+2p, W+2p)."""
    xt = x.transpose(1, 0, 2, 3)
    return np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p))) if p else xt


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: Optional[int] = None,
) -> Tensor:
    """Cross-correlate ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, K, K).

    ``padding=None`` requests resolution-preserving ("same") zero padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != wcin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    p = same_padding(k, dilation) if padding is None else int(padding)
    ho = output_size(h, k, stride, dilation, p)
    wo = output_size(w, k, stride, dilation, p)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive output size {ho}x{wo} for input {h}x{w}")

    xd = x.data
    wd = weight.data
    xp = _pad_cm(xd, p)
    tracking = is_grad_enabled() and (x.requires_grad or weight.requires_grad
                                      or (bias is not None and bias.requires_grad))
    out2d, saved = _correlate(xp, wd, stride, dilation, ho, wo, keep_cols=tracking and weight.requires_grad)
    out = out2d.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def _backward(g: np.ndarray):
        g2d = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        dx = dw = db = None
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if weight.requires_grad:
            w3 = wd.reshape(cout, cin, k * k)
            if saved:
                dw = (g2d @ saved[0].T).reshape(wd.shape)
            else:
                dw3 = np.empty_like(w3)
                for taps in _tap_groups(k * k, cin, n * ho * wo):
                    cols = _gather(xp, taps, k, stride, dilation, ho, wo)
                    dw3[:, :, taps.start : taps.stop] = (g2d @ cols.T).reshape(cout, cin, len(taps))
                dw = dw3.reshape(wd.shape)
        if x.requires_grad:
            q = dilation * (k - 1) - p
            if stride == 1 and q >= 0:
                # input gradient of a stride-1 correlation is a correlation of the
                # output gradient with the flipped, transposed kernel
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                dx2d, _ = _correlate(_pad_cm(g, q), wflip, 1, dilation, h, w, keep_cols=False)
                dx = np.ascontiguousarray(dx2d.reshape(cin, n, h, w).transpose(1, 0, 2, 3))
            else:
                w3 = wd.reshape(cout, cin, k * k)
                dxp = np.zeros_like(xp)
                for taps in _tap_groups(k * k, cin, n * ho * wo):
                    wg = w3[:, :, taps.start : taps.stop].reshape(cout, -1)
                    _scatter(dxp, wg.T @ g2d, taps, k, stride, dilation, ho, wo)
                if p:
                    dxp = dxp[:, :, p : p + h, p : p + w]
                dx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, _backward, "conv2d")


def conv2d_reference(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: Optional[int] = None,
) -> np.ndarray:
    """Direct nested-loop cross-correlation. Slow; used as a test oracle."""
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    p = same_padding(k, dilation) if padding is None else padding
    ho = output_size(h, k, stride, dilation, p)
    wo = output_size(w, k, stride, dilation, p)
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(cin):
                        for i in range(k):
                            yy = y * stride + i * dilation - p
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(k):
                                xi = xx * stride + j * dilation - p
                                if 0 <= xi < w:
                                    acc += float(x[b, c, yy, xi]) * float(weight[o, c, i, j])
                    out[b, o, y, xx] = acc
    return out
