"""Leakage metrics: pixel MSE, SSIM and the brightness-sweep maximum SSIM."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels

SWEEP_OFFSETS = tuple(range(0, 201, 10))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def taps(self) -> np.ndarray:
        r = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(r ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()


@dataclass(frozen=True)
class LeakageReport:
    mse: float
    offsets: tuple
    ssims: tuple
    max_adjusted_ssim: float
    argmax_offset: int
    wrap: bool = True
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def raw_ssim(self) -> float:
        return self.ssims[self.offsets.index(0)] if 0 in self.offsets else float("nan")


def _as_channels(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {a.shape}")
    return a


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Local SSIM over the 'valid' window positions of one 2-D channel."""
    taps = cfg.taps()
    mu_a = _kernels.filter_valid(a, taps)
    mu_b = _kernels.filter_valid(b, taps)
    s_aa = _kernels.filter_valid(a * a, taps) - mu_a * mu_a
    s_bb = _kernels.filter_valid(b * b, taps) - mu_b * mu_b
    s_ab = _kernels.filter_valid(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + cfg.c1) * (2.0 * s_ab + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (s_aa + s_bb + cfg.c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM of two images in 0..255, averaged over channels."""
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] not in (1, 3):
        raise ValueError("images must have 1 or 3 channels")
    if min(a.shape[1:]) < cfg.window:
        raise ValueError(f"image {a.shape[1:]} smaller than the {cfg.window}x{cfg.window} window")
    return float(np.mean([ssim_map(a[c], b[c], cfg).mean() for c in range(a.shape[0])]))


def quantize(img) -> np.ndarray:
    """Model-space [0, 1] image to 8-bit values: ``round(clamp(v, 0, 1) * 255)``."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def shift_brightness(img_u8, offset: int, wrap: bool = True) -> np.ndarray:
    v = np.asarray(img_u8, dtype=np.int64) + int(offset)
    return (v % 256 if wrap else np.clip(v, 0, 255)).astype(np.uint8)


def brightness_sweep(leaked, original, cfg: SsimConfig = SsimConfig(), offsets=SWEEP_OFFSETS,
                     wrap: bool = True) -> LeakageReport:
    """SSIM of ``leaked + offset`` against ``original`` for every offset; keep the best.

    Both images are 8-bit. Addition wraps modulo 256 by default; ``wrap=False``
    saturates at 255 instead. Ties go to the smallest offset.
    """
    leaked = np.asarray(leaked)
    original = np.asarray(original)
    if leaked.shape != original.shape:
        raise ValueError(f"shape mismatch {leaked.shape} vs {original.shape}")
    scores = tuple(ssim(shift_brightness(leaked, d, wrap), original, cfg) for d in offsets)
    best = int(np.argmax(scores))
    diff = (leaked.astype(np.float64) - original.astype(np.float64)) / 255.0
    return LeakageReport(
        mse=float(np.mean(diff ** 2)),
        offsets=tuple(int(d) for d in offsets),
        ssims=scores,
        max_adjusted_ssim=float(scores[best]),
        argmax_offset=int(offsets[best]),
        wrap=wrap,
    )


def assess_leakage(reconstruction, original, cfg: SsimConfig = SsimConfig(), wrap: bool = True) -> LeakageReport:
    """Sweep report for model-space images; ``mse`` is measured before quantization."""
    rec = np.asarray(reconstruction, dtype=np.float64)
    org = np.asarray(original, dtype=np.float64)
    report = brightness_sweep(quantize(rec), quantize(org), cfg, wrap=wrap)
    return replace(report, mse=float(np.mean((rec - org) ** 2)))
