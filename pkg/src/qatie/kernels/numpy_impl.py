"""Pure-numpy kernels: im2col convolutions and the exact integer convolution.

Float convolutions accumulate in float64 (via a float64 matmul) and cast
back to the input dtype, which keeps the fake-quant simulation and the
integer engine numerically close. The integer convolution rides the same
im2col path: float64 products of 8-bit-range integers are exact below
2**53, so the result is the exact integer accumulator.
"""

from __future__ import annotations

import numpy as np


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: padded input (N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, ww = x.shape
    co, ci, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    cols = _im2col(_pad_spatial(x, padding), kh, kw, stride, oh, ow).astype(np.float64)
    w2 = w.reshape(co, ci * kh * kw).astype(np.float64)
    out = np.matmul(w2, cols)  # (N, Co, oh*ow)
    return out.reshape(n, co, oh, ow).astype(x.dtype)


def conv2d_backward_input(
    g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_shape: tuple
) -> np.ndarray:
    n, ci, h, ww = in_shape
    co, _, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    dxp = np.zeros((n, ci, h + 2 * padding, ww + 2 * padding), dtype=np.float64)
    g2 = g.reshape(n, co, oh * ow).astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            wij = w[:, :, i, j].astype(np.float64)  # (Co, Ci)
            contrib = np.matmul(wij.T, g2).reshape(n, ci, oh, ow)
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + ww]
    return dxp.astype(g.dtype)


def conv2d_backward_weight(
    g: np.ndarray, x: np.ndarray, stride: int, padding: int, w_shape: tuple
) -> np.ndarray:
    co, ci, kh, kw = w_shape
    n = x.shape[0]
    oh, ow = g.shape[2], g.shape[3]
    cols = _im2col(_pad_spatial(x, padding), kh, kw, stride, oh, ow).astype(np.float64)
    g2 = g.reshape(n, co, oh * ow).astype(np.float64)
    # sum over batch of (Co, P) @ (P, K)
    dw = np.einsum("nop,nkp->ok", g2, cols)
    return dw.reshape(co, ci, kh, kw).astype(g.dtype)


def instance_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Per-plane normalization; returns (y, xhat, inv) with inv = 1/sqrt(var+eps)."""
    mu = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    xc = x.astype(np.float64) - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    y = (xhat * gamma + beta).astype(x.dtype, copy=False)
    return y, xhat, inv.astype(x.dtype)


def int_conv2d_acc(q: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Exact integer cross-correlation accumulator.

    q: zero-point-centered activations (N, Ci, H, W), |q| <= 255.
    w: quantized weights (Co, Ci, kh, kw), |w| <= 127.
    Returns int64 accumulators; all values fit in int32 for every
    configuration here (|acc| <= Ci*kh*kw * 255 * 127 < 2**31).
    """
    n, c, h, ww = q.shape
    co, ci, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    qp = _pad_spatial(q.astype(np.float64), padding)
    cols = _im2col(qp, kh, kw, stride, oh, ow)
    w2 = w.reshape(co, ci * kh * kw).astype(np.float64)
    acc = np.matmul(w2, cols)  # exact: integer-valued float64
    return np.rint(acc.reshape(n, co, oh, ow)).astype(np.int64)
