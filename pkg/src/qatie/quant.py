"""Quantization primitives: scale/zero-point parameters, moving-average
range observers, fake quantization with straight-through gradients, and
the fixed-point requantization multiplier used by the integer engine.

Conventions (one rule everywhere): rounding is half-away-from-zero;
symmetric signed INT8 uses the range [-127, 127] with zero_point 0;
asymmetric unsigned UINT8 uses [0, 255]. Weight quantization is
per-output-channel symmetric; activations are per-tensor affine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor

SCALE_FLOOR = 1e-8


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (np.round rounds halves
    to even, which would break integer/float equivalence)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Affine map q = round(x / scale) + zero_point.

    scale is float64, scalar () or per-channel (C,); zero_point has the
    matching shape. Symmetric implies zero_point == 0.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    signed: bool
    per_channel_axis: int | None = None
    bits: int = 8

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1

    def widened(self, extra_bits: int) -> "QuantParams":
        """Same real range on a 2**extra_bits finer lattice (test probe)."""
        return QuantParams(scale=self.scale / (1 << extra_bits),
                           zero_point=self.zero_point * (1 << extra_bits),
                           signed=self.signed, per_channel_axis=self.per_channel_axis,
                           bits=self.bits + extra_bits)

    def expand(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """scale/zero_point broadcast against an ndim-array along the channel axis."""
        if self.per_channel_axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.per_channel_axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def storage_dtype(self):
        return np.int8 if self.signed else np.uint8


def _as_qp(scale, zero_point, signed, axis=None) -> QuantParams:
    scale = np.asarray(scale, dtype=np.float64)
    zero_point = np.asarray(zero_point, dtype=np.int32)
    if np.any(scale <= 0):
        raise ConfigError("quantization scale must be positive")
    return QuantParams(scale=scale, zero_point=zero_point, signed=signed,
                       per_channel_axis=axis)


def qparams_from_minmax(rmin: float, rmax: float, signed: bool, symmetric: bool) -> QuantParams:
    """Derive per-tensor params from an observed range.

    The range is widened to include zero; a degenerate range falls back to
    the scale floor. Symmetric signed: scale = max(|min|, |max|)/127, zp 0.
    Asymmetric unsigned: scale = (max-min)/255, zp = round(-min/scale)
    clamped to [0, 255].
    """
    if rmax < rmin:
        raise ConfigError(f"qparams_from_minmax: max {rmax} < min {rmin}")
    rmin = min(float(rmin), 0.0)
    rmax = max(float(rmax), 0.0)
    if symmetric:
        if not signed:
            raise ConfigError("symmetric quantization requires a signed type")
        scale = max(abs(rmin), abs(rmax)) / 127.0
        return _as_qp(max(scale, SCALE_FLOOR), 0, signed=True)
    if signed:
        raise ConfigError("asymmetric quantization here is unsigned-only")
    scale = max((rmax - rmin) / 255.0, SCALE_FLOOR)
    zp = int(round_half_away(np.asarray(-rmin / scale)))
    return _as_qp(scale, min(max(zp, 0), 255), signed=False)


def qparams_per_channel_symmetric(w: np.ndarray, axis: int = 0) -> QuantParams:
    """Symmetric signed INT8 per output channel of a weight array."""
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    amax = np.abs(w).max(axis=reduce_axes).astype(np.float64)
    scale = np.maximum(amax / 127.0, SCALE_FLOOR)
    zp = np.zeros_like(scale, dtype=np.int32)
    return QuantParams(scale=scale, zero_point=zp, signed=True, per_channel_axis=axis)


def qparams_fixed_range(rmin: float, rmax: float) -> QuantParams:
    """Unsigned affine params for an analytically known activation range."""
    return qparams_from_minmax(rmin, rmax, signed=False, symmetric=False)


@dataclass
class IntTensor:
    """Quantized storage: int8 (weights), uint8 (activations) or int32
    (biases/accumulators) values plus their quantization parameters."""

    values: np.ndarray
    qp: QuantParams

    @property
    def shape(self):
        return self.values.shape


def quantize(x: np.ndarray, qp: QuantParams) -> IntTensor:
    scale, zp = qp.expand(x.ndim)
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale) + zp
    q = np.clip(q, qp.qmin, qp.qmax)
    return IntTensor(q.astype(qp.storage_dtype()), qp)


def dequantize(q: IntTensor, dtype=np.float32) -> np.ndarray:
    scale, zp = q.qp.expand(q.values.ndim)
    return ((q.values.astype(np.int64) - zp) * scale).astype(dtype)


def fake_quant(x: Tensor, qp: QuantParams, tape: Tape | None = None) -> Tensor:
    """Project onto the quantization lattice: dequantize(quantize(x)).

    Backward is the straight-through estimator: the upstream gradient
    passes unchanged where the pre-clamp integer lies inside [qmin, qmax]
    and is zero where the forward pass clamped.
    """
    scale, zp = qp.expand(x.data.ndim)
    q_unclamped = round_half_away(x.data.astype(np.float64) / scale) + zp
    mask = (q_unclamped >= qp.qmin) & (q_unclamped <= qp.qmax)
    q = np.clip(q_unclamped, qp.qmin, qp.qmax)
    out = Tensor(((q - zp) * scale).astype(x.dtype))
    return _record_fq(tape, x, out, mask)


def _record_fq(tape, x, out, mask):
    if tape is not None:
        tape.record("fake_quant", (x,), out, lambda g: (np.where(mask, g, 0.0),))
    return out


class Observer:
    """Moving-average min/max tracker.

    First update adopts the batch range; afterwards
    running <- momentum * running + (1 - momentum) * batch.
    State is float32 so checkpoints round-trip bit-exactly.
    """

    __slots__ = ("momentum", "running_min", "running_max", "initialized")

    def __init__(self, momentum: float = 0.99):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"observer momentum must be in (0, 1), got {momentum}")
        self.momentum = np.float32(momentum)
        self.running_min = np.float32(0.0)
        self.running_max = np.float32(0.0)
        self.initialized = False

    def update(self, x: np.ndarray) -> None:
        bmin = np.float32(x.min())
        bmax = np.float32(x.max())
        if not self.initialized:
            self.running_min = bmin
            self.running_max = bmax
            self.initialized = True
        else:
            m = self.momentum
            one_m = np.float32(1.0) - m
            self.running_min = np.float32(m * self.running_min + one_m * bmin)
            self.running_max = np.float32(m * self.running_max + one_m * bmax)

    def qparams(self) -> QuantParams:
        if not self.initialized:
            raise ConfigError("observer has no statistics yet")
        return qparams_from_minmax(float(self.running_min), float(self.running_max),
                                   signed=False, symmetric=False)

    def state(self) -> np.ndarray:
        return np.array([self.running_min, self.running_max,
                         1.0 if self.initialized else 0.0, self.momentum], dtype=np.float32)

    @classmethod
    def from_state(cls, state: np.ndarray) -> "Observer":
        obs = cls(momentum=float(state[3]))
        obs.running_min = np.float32(state[0])
        obs.running_max = np.float32(state[1])
        obs.initialized = bool(state[2] > 0.5)
        return obs


# ------------------------------------------------------- fixed-point requant


@dataclass(frozen=True)
class RequantMultiplier:
    """Real multiplier M (typically s_in * s_w / s_out) as m0 * 2^(-31-shift)
    with mantissa m0 in [2^30, 2^31). shift may go negative when M >= 1
    (degenerate scale combinations on random networks); the represented
    value stays within 2^-31 relative of M either way.
    """

    m0: np.ndarray  # int64, scalar () or per-channel (C,)
    shift: np.ndarray  # int64, same shape

    @classmethod
    def from_real(cls, m) -> "RequantMultiplier":
        m = np.atleast_1d(np.asarray(m, dtype=np.float64))
        if np.any(m <= 0):
            raise ConfigError("requant multiplier must be positive")
        mant, exp = np.frexp(m)  # m = mant * 2^exp, mant in [0.5, 1)
        shift = -exp.astype(np.int64)
        m0 = round_half_away(mant * (1 << 31)).astype(np.int64)
        over = m0 == (1 << 31)
        m0 = np.where(over, m0 >> 1, m0)
        shift = np.where(over, shift - 1, shift)
        if np.any(31 + shift < 1) or np.any(31 + shift > 62):
            raise ConfigError(
                f"requant multiplier out of representable range: {m}"
            )
        if m.shape == (1,):
            return cls(m0.reshape(()), shift.reshape(()))
        return cls(m0, shift)

    def real(self) -> np.ndarray:
        return self.m0.astype(np.float64) * np.exp2(-31.0 - self.shift.astype(np.float64))


def fixedpoint_mul(acc: np.ndarray, rq: RequantMultiplier, channel_axis: int | None = None
                   ) -> np.ndarray:
    """Round-to-nearest (half away from zero) of acc * M in 64-bit integers."""
    acc = acc.astype(np.int64)
    m0, shift = rq.m0, rq.shift
    if channel_axis is not None and m0.ndim == 1:
        bshape = [1] * acc.ndim
        bshape[channel_axis] = -1
        m0 = m0.reshape(bshape)
        shift = shift.reshape(bshape)
    n = 31 + shift
    prod = acc * m0
    half = np.left_shift(np.int64(1), n - 1)
    return np.sign(prod) * np.right_shift(np.abs(prod) + half, n)
