"""Training objective and evaluation metrics.

The objective mixes three terms: a PSNR loss normalized against a 50 dB
baseline, a cosine-direction loss over the flattened batch, and an
outlier-aware L1 term that exponentially down-weights pixels whose
absolute error sits above the batch mean (weights are constants in the
backward pass). SSIM is evaluation-only and never recorded on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import kernels
from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor

RMSE_FLOOR = 1e-8
EPS_NORM = 1e-12


@dataclass
class LossWeights:
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class PsnrConfig:
    max_value: float = 1.0
    rmse_floor: float = RMSE_FLOOR

    def __post_init__(self):
        if self.max_value <= 0 or self.rmse_floor <= 0:
            raise ConfigError("max_value and rmse_floor must be positive")


def rmse(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    d = F.sub(pred, target, tape)
    return F.sqrt_op(F.clamp_min(F.mean_all(F.hadamard(d, d, tape), tape), 0.0, tape), tape)


def _rmse_floored(pred, target, cfg: PsnrConfig, tape):
    d = F.sub(pred, target, tape)
    mse = F.mean_all(F.hadamard(d, d, tape), tape)
    return F.sqrt_op(F.clamp_min(mse, cfg.rmse_floor ** 2, tape), tape)


def psnr(pred: Tensor, target: Tensor, cfg: PsnrConfig = PsnrConfig(),
         tape: Tape | None = None) -> Tensor:
    """20 * log10(max_value / rmse), with rmse floored so identical images
    give a finite cap instead of infinity."""
    r = _rmse_floored(pred, target, cfg, tape)
    # 20*log10(MAX/r) = 20*log10(MAX) - 20*log10(r)
    return F.add_const(F.scale(F.log10_op(r, tape), -20.0, tape),
                       20.0 * np.log10(cfg.max_value), tape)


def psnr_loss(pred: Tensor, target: Tensor, cfg: PsnrConfig = PsnrConfig(),
              tape: Tape | None = None) -> Tensor:
    """(50 - PSNR) / 100; negative values past the 50 dB baseline are legal."""
    return F.add_const(F.scale(psnr(pred, target, cfg, tape), -0.01, tape), 0.5, tape)


def cosine_loss(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """1 - <pred, target> / (|pred| |target| + eps), both flattened over the batch."""
    _require_same(pred, target)
    num = F.sum_all(F.hadamard(pred, target, tape), tape)
    na = F.sqrt_op(F.clamp_min(F.sum_all(F.hadamard(pred, pred, tape), tape), 0.0, tape), tape)
    nb = F.sqrt_op(F.clamp_min(F.sum_all(F.hadamard(target, target, tape), tape), 0.0, tape), tape)
    denom = F.add_const(F.hadamard(na, nb, tape), EPS_NORM, tape)
    return F.add_const(F.scale(F.div(num, denom, tape), -1.0, tape), 1.0, tape)


def outlier_weights(pred: Tensor, target: Tensor) -> np.ndarray:
    """Per-pixel down-weighting factors from the absolute-error distribution."""
    e = np.abs(pred.data - target.data)
    mu = e.mean(dtype=np.float64)
    sigma = e.std(dtype=np.float64)
    w = np.exp(-np.maximum(0.0, (e.astype(np.float64) - mu) / (sigma + 1e-8)))
    return w.astype(pred.data.dtype)


def outlier_loss(pred: Tensor, target: Tensor, tape: Tape | None = None,
                 frozen_weights: np.ndarray | None = None) -> Tensor:
    """Mean of w * |pred - target| with w = exp(-max(0, (e - mu)/(sigma + 1e-8))).

    mu/sigma are the batch mean/std of the absolute error; the weights are
    computed off-tape and enter as constants, so no gradient flows through
    the error statistics. ``frozen_weights`` substitutes precomputed
    constants (the finite-difference oracle differentiates against fixed
    weights, matching the stop-gradient semantics).
    """
    _require_same(pred, target)
    e = F.abs_op(F.sub(pred, target, tape), tape)
    w = frozen_weights if frozen_weights is not None else outlier_weights(pred, target)
    return F.mean_all(F.hadamard(Tensor(w), e, tape), tape)


def total_loss(pred: Tensor, target: Tensor, weights: LossWeights = LossWeights(),
               cfg: PsnrConfig = PsnrConfig(), tape: Tape | None = None,
               frozen_outlier_weights: np.ndarray | None = None) -> Tensor:
    return compute_losses(pred, target, weights, cfg, tape, frozen_outlier_weights)["total"]


def compute_losses(pred: Tensor, target: Tensor, weights: LossWeights = LossWeights(),
                   cfg: PsnrConfig = PsnrConfig(), tape: Tape | None = None,
                   frozen_outlier_weights: np.ndarray | None = None) -> dict:
    """All loss terms on one tape; 'total' is alpha*psnr + beta*cos + gamma*outlier."""
    lp = psnr_loss(pred, target, cfg, tape)
    lc = cosine_loss(pred, target, tape)
    lo = outlier_loss(pred, target, tape, frozen_outlier_weights)
    total = F.add(F.add(F.scale(lp, weights.alpha, tape),
                        F.scale(lc, weights.beta, tape), tape),
                  F.scale(lo, weights.gamma, tape), tape)
    return {"total": total, "psnr": lp, "cosine": lc, "outlier": lo}


def _require_same(pred, target):
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"loss: prediction shape {pred.data.shape} != target shape {target.data.shape}"
        )


# ------------------------------------------------------------------- metrics


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: Tensor, target: Tensor, max_value: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), valid
    windows only, C1=(0.01*L)^2, C2=(0.03*L)^2. Channels are averaged.
    Evaluation-only: not differentiable, not on the tape."""
    _require_same(pred, target)
    n, c, h, w = pred.data.shape
    win = 11
    if h < win or w < win:
        raise ShapeError(f"ssim: image {h}x{w} smaller than the {win}x{win} window")
    k = _gaussian_window(win, 1.5).reshape(1, 1, win, win)
    x = pred.data.reshape(n * c, 1, h, w).astype(np.float64)
    y = target.data.reshape(n * c, 1, h, w).astype(np.float64)

    def smooth(a):
        return kernels.conv2d_forward(a, k, 1, 0)

    mu_x = smooth(x)
    mu_y = smooth(y)
    sxx = smooth(x * x) - mu_x * mu_x
    syy = smooth(y * y) - mu_y * mu_y
    sxy = smooth(x * y) - mu_x * mu_y
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    )
    return float(ssim_map.mean())


def psnr_value(pred: Tensor, target: Tensor, cfg: PsnrConfig = PsnrConfig()) -> float:
    """PSNR in dB as a plain float (no tape)."""
    return psnr(pred, target, cfg, None).item()
