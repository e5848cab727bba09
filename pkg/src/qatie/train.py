"""Full-precision training loop and QAT fine-tuning.

Schedule: linear warmup from warmup_start_lr to base_lr over the warmup
epochs, then cosine decay down to min_lr at the final step. Gradients
accumulate over grad_accum_steps micro-batches (averaged), are clamped
element-wise to clip_range, and feed a standard bias-corrected Adam
update. Every run is a pure function of (seed, config, data) on one
platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights, PsnrConfig, compute_losses, ssim
from .model import Network, pad_to_multiple, crop_to
from .qat import QatNetwork, attach_fakequant, default_qat_plan
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    grad_accum_steps: int = 1
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-5
    min_lr: float | None = None  # defaults to base_lr / 100
    clip_range: tuple = (-1.0, 1.0)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.clip_range
        if lo >= hi:
            raise ConfigError(f"clip_range lower bound {lo} must be below upper {hi}")
        if self.warmup_epochs > self.epochs and self.epochs > 0:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100.0
        if self.grad_accum_steps < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and grad_accum_steps must be >= 1")

    @classmethod
    def paper_protocol(cls, seed: int = 0) -> "TrainConfig":
        """50 epochs, effective batch 128 via accumulation of 2, warmup
        1e-5 -> 1e-4 over 5 epochs, clip [-1, 1]."""
        return cls(epochs=50, batch_size=64, grad_accum_steps=2, base_lr=1e-4,
                   warmup_epochs=5, warmup_start_lr=1e-5, seed=seed)

    @classmethod
    def desk(cls, seed: int = 0, steps: int = 500) -> "TrainConfig":
        """Desk-scale overfit preset: 16 pairs, batch 8 (2 steps/epoch),
        a hotter base lr, 500 optimizer steps total."""
        return cls(epochs=steps // 2, batch_size=8, grad_accum_steps=1,
                   base_lr=2e-3, warmup_epochs=5, warmup_start_lr=1e-5, seed=seed)


@dataclass
class QatConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-5  # constant; 10x below the full-precision base lr
    clip_range: tuple = (-1.0, 1.0)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("QAT learning rate must be non-negative")


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at an optimizer step. Warmup ends exactly at base_lr;
    the cosine reaches min_lr at step = epochs * steps_per_epoch."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if warm_steps > 0 and step < warm_steps:
        frac = step / warm_steps
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    if total <= warm_steps:
        return cfg.base_lr
    frac = min(1.0, (step - warm_steps) / (total - warm_steps))
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def grad_clip(grads, lo: float, hi: float):
    """Element-wise clamp; accepts one array or a list of arrays."""
    if lo >= hi:
        raise ConfigError(f"clip bounds ({lo}, {hi}) are inverted")
    if isinstance(grads, np.ndarray):
        return np.clip(grads, lo, hi)
    return [np.clip(g, lo, hi) for g in grads]


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}


def adam_step(params, grads: dict, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - np.asarray(lr * update, dtype=p.data.dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(pairs, idx):
    low = np.concatenate([pairs[i].low.data for i in idx], axis=0)
    high = np.concatenate([pairs[i].high.data for i in idx], axis=0)
    return Tensor(low), Tensor(high)


def _run_loop(model, pairs, *, total_steps, batch_size, accum, lr_fn,
              clip_range, weights, seed, history):
    """Shared inner loop for FP32 training and QAT fine-tuning."""
    params = model.named_parameters()
    state = AdamState(params)
    rng = np.random.default_rng(seed)
    psnr_cfg = PsnrConfig()
    step = 0
    batches: list = []
    while step < total_steps:
        micro = 0
        sums = {"total": 0.0, "psnr": 0.0, "cosine": 0.0, "outlier": 0.0}
        model.zero_grad()
        while micro < accum:
            if not batches:
                batches = _batches(len(pairs), batch_size, rng)
            low, high = _stack(pairs, batches.pop(0))
            tape = Tape()
            pred = model.forward(low, tape)
            parts = compute_losses(pred, high, weights, psnr_cfg, tape)
            loss_val = parts["total"].item()
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss {loss_val} at optimizer step {step}")
            backward(tape, parts["total"])
            for k in sums:
                sums[k] += parts[k].item()
            micro += 1
        lr = lr_fn(step)
        grads = {}
        for name, p in params:
            if p.grad is None:
                grads[name] = np.zeros_like(p.data)
            else:
                grads[name] = np.clip(p.grad / accum, clip_range[0], clip_range[1])
        adam_step(params, grads, state, lr)
        mean_psnr_loss = sums["psnr"] / accum
        history.append({
            "step": step, "lr": lr,
            "loss": sums["total"] / accum,
            "loss_psnr": mean_psnr_loss,
            "loss_cosine": sums["cosine"] / accum,
            "loss_outlier": sums["outlier"] / accum,
            "psnr_db": 50.0 - 100.0 * mean_psnr_loss,
        })
        step += 1
    return history


def train(net: Network, pairs, cfg: TrainConfig):
    """Full-precision training. Returns (net, history); history holds one
    record per optimizer step (step, lr, loss components, batch PSNR)."""
    if not pairs:
        raise DataError("empty training set")
    micro_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    steps_per_epoch = max(1, math.ceil(micro_per_epoch / cfg.grad_accum_steps))
    total_steps = cfg.epochs * steps_per_epoch
    history: list = []
    if total_steps == 0:
        return net, history
    _run_loop(net, pairs,
              total_steps=total_steps,
              batch_size=cfg.batch_size, accum=cfg.grad_accum_steps,
              lr_fn=lambda s: lr_at(s, steps_per_epoch, cfg),
              clip_range=cfg.clip_range, weights=cfg.loss_weights,
              seed=cfg.seed, history=history)
    return net, history


def qat_finetune(net: Network, pairs, cfg: QatConfig):
    """Attach fake-quant and fine-tune at a constant reduced rate (no
    warmup, no cosine). Observers track activations during training.
    Returns (instrumented network in frozen mode, history)."""
    if not pairs:
        raise DataError("empty fine-tuning set")
    qnet = attach_fakequant(net, default_qat_plan(cfg.momentum))
    qnet.set_mode("train")
    history: list = []
    _run_loop(qnet, pairs,
              total_steps=cfg.steps,
              batch_size=cfg.batch_size, accum=1,
              lr_fn=lambda s: cfg.lr,
              clip_range=cfg.clip_range, weights=cfg.loss_weights,
              seed=cfg.seed, history=history)
    qnet.set_mode("frozen")
    return qnet, history


def eval_model(model, pairs) -> tuple[float, float]:
    """(mean PSNR dB, mean SSIM) over pairs. Works for the float network,
    the instrumented network (frozen mode) and the INT8 graph."""
    if not pairs:
        raise DataError("cannot evaluate on an empty dataset")
    from .losses import psnr_value

    total_psnr = 0.0
    total_ssim = 0.0
    for pair in pairs:
        x, rec = pad_to_multiple(pair.low, 8)
        pred = model.forward(x, None)
        pred = crop_to(pred, rec)
        total_psnr += psnr_value(pred, pair.high)
        total_ssim += ssim(pred, pair.high)
    n = len(pairs)
    return total_psnr / n, total_ssim / n
