"""Paired-image ingestion, patch extraction, and the synthetic degradation
generator that stands in for a captured dataset at desk scale.

Scenes are procedural (seeded gradients, soft blobs, sinusoidal texture)
kept inside [0.08, 0.92] so additive noise rarely clips. The degraded
view applies, in order: gamma shift, per-channel gain, separable
Gaussian blur, Gaussian noise, clip to [0, 1]. All randomness flows from
one seeded generator, so a config is a complete recipe for its dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class ImagePair:
    low: Tensor   # degraded input
    high: Tensor  # target

    def __post_init__(self):
        if self.low.data.shape != self.high.data.shape:
            raise DataError(
                f"pair shapes differ: {self.low.data.shape} vs {self.high.data.shape}"
            )
        for name, t in (("low", self.low), ("high", self.high)):
            d = t.data
            if d.min() < 0.0 or d.max() > 1.0:
                raise DataError(f"{name} image values outside [0, 1]")


@dataclass
class SyntheticConfig:
    count: int = 16
    size: int = 32
    blur_sigma: float = 0.6
    noise_sigma: float = 0.04
    color_gain: tuple = (0.92, 1.0, 1.06)
    gamma_shift: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.size % 8:
            raise ConfigError(f"patch size must be a multiple of 8, got {self.size}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur/noise sigmas must be non-negative")


# ----------------------------------------------------------------- PNG I/O


def load_png(path) -> Tensor:
    """8-bit RGB PNG to a (1, 3, H, W) tensor in [0, 1] via v/255."""
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError as exc:  # pragma: no cover
        raise DataError("Pillow is required for PNG I/O") from exc
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as exc:
        raise DataError(f"image file not found: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"malformed or non-image file: {path}") from exc
    if img.mode != "RGB":
        bands = len(img.getbands())
        raise DataError(
            f"expected 3-channel RGB PNG, got mode {img.mode!r} ({bands} channels): {path}"
        )
    arr = np.asarray(img, dtype=np.float32) / 255.0  # (H, W, 3)
    return Tensor(arr.transpose(2, 0, 1)[None])


def save_png(t: Tensor, path) -> None:
    from PIL import Image

    if t.data.shape[0] != 1 or t.data.shape[1] != 3:
        raise DataError(f"save_png needs a (1, 3, H, W) tensor, got {t.data.shape}")
    arr = np.clip(np.rint(t.data[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------------- patches


def extract_patches(pair: ImagePair, patch: int, stride: int,
                    seed: int | None = None) -> list[ImagePair]:
    """Aligned crops at identical coordinates in both images; a seed
    shuffles the grid order."""
    _, _, h, w = pair.low.data.shape
    if patch > h or patch > w:
        raise DataError(f"patch {patch} larger than image {h}x{w}")
    if stride < 1:
        raise DataError(f"stride must be positive, got {stride}")
    coords = [(i, j) for i in range(0, h - patch + 1, stride)
              for j in range(0, w - patch + 1, stride)]
    if seed is not None:
        np.random.default_rng(seed).shuffle(coords)
    out = []
    for i, j in coords:
        lo = Tensor(pair.low.data[:, :, i : i + patch, j : j + patch].copy())
        hi = Tensor(pair.high.data[:, :, i : i + patch, j : j + patch].copy())
        out.append(ImagePair(lo, hi))
    return out


# --------------------------------------------------------------- synthesis


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    # separable blur with reflect padding, per channel; img is (C, H, W)
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()

    def along(a, axis):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (radius, radius)
        ap = np.pad(a, pad, mode="reflect")
        return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), axis, ap)

    return along(along(img.astype(np.float64), 1), 2)


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural target image (3, size, size) within [0.08, 0.92]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.empty((3, size, size))
    for c in range(3):
        a, b = rng.uniform(-0.35, 0.35, size=2)
        img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-0.25, 0.25, size=3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2))
        img += amp[:, None, None] * bump
    fx, fy = rng.uniform(2, 7, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.06 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return np.clip(img, 0.08, 0.92)


def synth_generate(cfg: SyntheticConfig) -> list[ImagePair]:
    rng = np.random.default_rng(cfg.seed)
    pairs = []
    for _ in range(cfg.count):
        high = _scene(rng, cfg.size)
        low = high.copy()
        if cfg.gamma_shift:
            low = low ** (1.0 + cfg.gamma_shift)
        gains = np.asarray(cfg.color_gain, dtype=np.float64)
        if not np.allclose(gains, 1.0):
            low = low * gains[:, None, None]
        if cfg.blur_sigma > 0:
            low = _gaussian_blur(low, cfg.blur_sigma)
        if cfg.noise_sigma > 0:
            low = low + rng.normal(0.0, cfg.noise_sigma, size=low.shape)
        low = np.clip(low, 0.0, 1.0)
        pairs.append(ImagePair(Tensor(low[None].astype(np.float32)),
                               Tensor(high[None].astype(np.float32))))
    return pairs
