"""Forward primitives with tape-recorded adjoints.

The set is exactly what the network and its training objective need:
convolution (cross-correlation, no kernel flip), tanh, Hadamard product,
LeakyReLU, instance norm, nearest 2x upsample, channel concat, add/sub,
clip to [0,1], and the scalar machinery the losses are built from
(reductions, sqrt, log10, abs, clamp, division, affine). Each op takes an
optional ``tape``; with ``tape=None`` it is a plain forward evaluation.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tape, Tensor


def _record(tape, op, inputs, out, bwd):
    if tape is not None:
        tape.record(op, inputs, out, bwd)
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------- network ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation. weight is (Co, Ci, kh, kw); bias is (1, Co, 1, 1).

    Output spatial dims follow floor((H + 2p - k)/stride) + 1 with zero padding.
    """
    n, c, h, w_in = x.data.shape
    co, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: weight in-channels ({ci}) != input channels ({c})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got ({kh}, {kw})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride/padding ({stride}, {padding})")
    if h + 2 * padding < kh or w_in + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: spatial dims {h}x{w_in} (+pad {padding}) smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.data.shape != (1, co, 1, 1):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} != (1, {co}, 1, 1)"
        )
    out_data = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out_data += bias.data
    out = Tensor._wrap(out_data)

    def bwd(g):
        gx = kernels.conv2d_backward_input(g, weight.data, stride, padding, x.data.shape)
        gw = kernels.conv2d_backward_weight(g, x.data, stride, padding, weight.data.shape)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(tape, "conv2d", inputs, out, bwd)


def tanh_map(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor._wrap(y)
    return _record(tape, "tanh", (x,), out, lambda g: (g * (1.0 - y * y),))


def hadamard(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same_shape("hadamard", a, b)
    out = Tensor._wrap(a.data * b.data)
    return _record(tape, "hadamard", (a, b), out, lambda g: (g * b.data, g * a.data))


def leaky_relu(x: Tensor, slope: float, tape: Tape | None = None) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    # for slope in (0,1), max(x, slope*x) is exactly the leaky response
    out = Tensor._wrap(np.maximum(x.data, x.data.dtype.type(slope) * x.data))

    def bwd(g):
        return (np.where(x.data >= 0, g, slope * g),)

    return _record(tape, "leaky_relu", (x,), out, bwd)


def instance_norm_array(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Plain-array instance norm; shared by the tape op and the INT8 float island."""
    y, _, _ = kernels.instance_norm_forward(x, gamma, beta, eps)
    return y


def leaky_relu_array(x: np.ndarray, slope: float) -> np.ndarray:
    return np.maximum(x, x.dtype.type(slope) * x)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                  tape: Tape | None = None) -> Tensor:
    """Per (sample, channel) plane normalization over HxW with affine.

    Population variance. An HxW = 1 plane is legal: variance is zero, eps
    dominates, and the output is beta.
    """
    if eps <= 0:
        raise ShapeError(f"instance_norm: eps must be positive, got {eps}")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (1, c, 1, 1):
            raise ShapeError(f"instance_norm: {name} shape {t.data.shape} != (1, {c}, 1, 1)")
    y, xhat, inv = kernels.instance_norm_forward(x.data, gamma.data, beta.data, eps)
    out = Tensor._wrap(y)

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        return gx.astype(g.dtype), ggamma, gbeta

    return _record(tape, "instance_norm", (x, gamma, beta), out, bwd)


def upsample_nearest2x(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor._wrap(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def bwd(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _record(tape, "upsample_nearest2x", (x,), out, bwd)


def concat_channels(parts: list[Tensor], tape: Tape | None = None) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    head = parts[0].data
    for k, p in enumerate(parts[1:], start=1):
        for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
            if p.data.shape[axis] != head.shape[axis]:
                raise ShapeError(
                    f"concat_channels: part {k} {name} {p.data.shape[axis]} != {head.shape[axis]}"
                )
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))

    def bwd(g):
        offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(tape, "concat_channels", tuple(parts), out, bwd)


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor._wrap(a.data + b.data)
    return _record(tape, "add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor._wrap(a.data - b.data)
    return _record(tape, "sub", (a, b), out, lambda g: (g, -g))


def clip01(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Clamp to [0, 1]. Adjoint passes through on the closed interval
    (boundary ties included), zero outside."""
    out = Tensor._wrap(np.clip(x.data, 0.0, 1.0))

    def bwd(g):
        mask = (x.data >= 0.0) & (x.data <= 1.0)
        return (np.where(mask, g, 0.0),)

    return _record(tape, "clip01", (x,), out, bwd)


# ------------------------------------------------------------- loss support


def scale(x: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(k))
    return _record(tape, "scale", (x,), out, lambda g: (g * g.dtype.type(k),))


def add_const(x: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data + x.data.dtype.type(k))
    return _record(tape, "add_const", (x,), out, lambda g: (g,))


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.mean(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1))
    size = x.data.size

    def bwd(g):
        return (np.broadcast_to(g / size, x.data.shape).astype(g.dtype),)

    return _record(tape, "mean_all", (x,), out, bwd)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1))

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).astype(g.dtype),)

    return _record(tape, "sum_all", (x,), out, bwd)


def sqrt_op(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y)

    def bwd(g):
        # infinite slope at y == 0 is discarded upstream by clamp_min's mask
        with np.errstate(divide="ignore"):
            return (g / (2.0 * y),)

    return _record(tape, "sqrt", (x,), out, bwd)


def log10_op(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.log10(x.data))
    ln10 = np.log(10.0)
    return _record(tape, "log10", (x,), out, lambda g: (g / (x.data * ln10),))


def abs_op(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)  # subgradient 0 at x = 0
    return _record(tape, "abs", (x,), out, lambda g: (g * sign,))


def clamp_min(x: Tensor, floor: float, tape: Tape | None = None) -> Tensor:
    """max(x, floor); adjoint passes only where x > floor (zero at the tie,
    keeping sqrt-of-floored-mse finite at zero error)."""
    mask = x.data > floor
    out = Tensor(np.maximum(x.data, x.data.dtype.type(floor)))
    return _record(tape, "clamp_min", (x,), out, lambda g: (np.where(mask, g, 0.0),))


def div(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_same_shape("div", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _record(tape, "div", (a, b), out, bwd)
