"""Numba-compiled kernels: direct-loop convolutions.

Loops are serial (parallel=False) so summation order, and therefore the
float result, is fixed for a given input. Accumulation happens in float64
regardless of the storage dtype, matching the numpy path's float64
matmul accumulation; padding is done inside the jitted function to avoid
np.pad's per-call overhead. cache=True persists compiled artifacts
across processes.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward(x, w, stride, padding):
    n, ci, h, ww = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, ci, h + 2 * padding, ww + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + ww] = x
    out = np.empty((n, co, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += np.float64(
                                    xp[b, c, y * stride + i, z * stride + j]
                                ) * np.float64(w[o, c, i, j])
                    out[b, o, y, z] = acc
    return out


@njit(cache=True)
def _conv2d_backward_input(g, w, stride, padding, h, ww):
    n, co, oh, ow = g.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((n, ci, h + 2 * padding, ww + 2 * padding), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    gv = np.float64(g[b, o, y, z])
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                dxp[b, c, y * stride + i, z * stride + j] += gv * np.float64(
                                    w[o, c, i, j]
                                )
    return dxp[:, :, padding : padding + h, padding : padding + ww]


@njit(cache=True)
def _conv2d_backward_weight(g, x, stride, padding, kh, kw):
    n, co, oh, ow = g.shape
    ci, h, ww = x.shape[1], x.shape[2], x.shape[3]
    xp = np.zeros((n, ci, h + 2 * padding, ww + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + ww] = x
    dw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    gv = np.float64(g[b, o, y, z])
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                dw[o, c, i, j] += gv * np.float64(
                                    xp[b, c, y * stride + i, z * stride + j]
                                )
    return dw


@njit(cache=True)
def _int_conv2d_acc(q, w, stride, padding):
    n, ci, h, ww = q.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    qp = np.zeros((n, ci, h + 2 * padding, ww + 2 * padding), dtype=np.int64)
    qp[:, :, padding : padding + h, padding : padding + ww] = q
    out = np.empty((n, co, oh, ow), dtype=np.int64)
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    acc = np.int64(0)
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += qp[b, c, y * stride + i, z * stride + j] * np.int64(
                                    w[o, c, i, j]
                                )
                    out[b, o, y, z] = acc
    return out


@njit(cache=True)
def _instance_norm_forward(x, gamma, beta, eps):
    n, c, h, w = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((n, c, 1, 1), dtype=x.dtype)
    m = h * w
    for b in range(n):
        for ch in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += np.float64(x[b, ch, i, j])
            mu = s / m
            v = 0.0
            for i in range(h):
                for j in range(w):
                    d = np.float64(x[b, ch, i, j]) - mu
                    v += d * d
            iv = 1.0 / np.sqrt(v / m + eps)
            inv[b, ch, 0, 0] = iv
            g = np.float64(gamma[0, ch, 0, 0])
            be = np.float64(beta[0, ch, 0, 0])
            for i in range(h):
                for j in range(w):
                    xh = (np.float64(x[b, ch, i, j]) - mu) * iv
                    xhat[b, ch, i, j] = xh
                    y[b, ch, i, j] = xh * g + be
    return y, xhat, inv


def conv2d_forward(x, w, stride, padding):
    return _conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, padding)


def instance_norm_forward(x, gamma, beta, eps):
    return _instance_norm_forward(np.ascontiguousarray(x), gamma, beta, eps)


def conv2d_backward_input(g, w, stride, padding, in_shape):
    dx = _conv2d_backward_input(
        np.ascontiguousarray(g), np.ascontiguousarray(w), stride, padding,
        in_shape[2], in_shape[3],
    )
    return dx.astype(g.dtype, copy=False)


def conv2d_backward_weight(g, x, stride, padding, w_shape):
    dw = _conv2d_backward_weight(
        np.ascontiguousarray(g), np.ascontiguousarray(x), stride, padding,
        w_shape[2], w_shape[3],
    )
    return dw.astype(g.dtype, copy=False)


def int_conv2d_acc(q, w, stride, padding):
    return _int_conv2d_acc(
        np.ascontiguousarray(q.astype(np.int64, copy=False)),
        np.ascontiguousarray(w.astype(np.int64, copy=False)),
        stride, padding,
    )
