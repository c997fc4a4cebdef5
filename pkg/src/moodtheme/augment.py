"""Training-time augmentation: random time scale, random crop, SpecAugment masks, Mixup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectro import Spectrogram, pad_or_crop


@dataclass
class AugmentConfig:
    crop_enabled: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    spec_freq_masks: int = 2
    spec_freq_width_max: int = 16
    spec_time_masks: int = 2
    spec_time_width_max: int = 64
    mixup_alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        self.scale_range = (float(lo), float(hi))
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.mixup_alpha < 0:
            raise ValueError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        for name in ("spec_freq_masks", "spec_freq_width_max", "spec_time_masks", "spec_time_width_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(crop_enabled=False, scale_range=(1.0, 1.0), spec_freq_masks=0,
                   spec_freq_width_max=0, spec_time_masks=0, spec_time_width_max=0,
                   mixup_alpha=0.0, seed=seed)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of loader scheduling."""
    return np.random.default_rng([seed, epoch, index])


def random_scale(spec: Spectrogram, factor: float) -> Spectrogram:
    """Resample the time axis to round(frames * factor) by linear interpolation."""
    f = spec.frames
    new = int(np.floor(f * factor + 0.5))
    if new < 1:
        raise ValueError(f"scale factor {factor} leaves {new} frames")
    if new == f:
        return spec.replace(spec.values.copy())
    pos = np.linspace(0.0, f - 1, new) if new > 1 else np.zeros(1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, f - 1)
    frac = pos - i0
    v0, v1 = spec.values[:, i0], spec.values[:, i1]
    out = v0 + frac * (v1 - v0)
    # guard against last-ulp overshoot so bounds are preserved exactly
    out = np.clip(out, np.minimum(v0, v1), np.maximum(v0, v1))
    return spec.replace(out.astype(spec.values.dtype, copy=False))


@dataclass(frozen=True)
class Mask:
    axis: int  # 0 = bands, 1 = frames
    start: int
    width: int


def draw_masks(bands: int, frames: int, cfg: AugmentConfig, rng: np.random.Generator) -> list[Mask]:
    if cfg.spec_freq_width_max > bands or cfg.spec_time_width_max > frames:
        raise ValueError(f"mask widths ({cfg.spec_freq_width_max}, {cfg.spec_time_width_max}) exceed "
                         f"spectrogram extent ({bands}, {frames})")
    masks = []
    for axis, count, wmax, extent in ((0, cfg.spec_freq_masks, cfg.spec_freq_width_max, bands),
                                      (1, cfg.spec_time_masks, cfg.spec_time_width_max, frames)):
        for _ in range(count):
            w = int(rng.integers(0, wmax + 1))
            start = int(rng.integers(0, extent - w + 1))
            masks.append(Mask(axis, start, w))
    return masks


def apply_masks(spec: Spectrogram, masks: list[Mask], fill: float = 0.0) -> Spectrogram:
    out = spec.values.copy()
    for m in masks:
        if m.axis == 0:
            out[m.start:m.start + m.width, :] = fill
        else:
            out[:, m.start:m.start + m.width] = fill
    return spec.replace(out)


def spec_augment(spec: Spectrogram, cfg: AugmentConfig, rng: np.random.Generator) -> Spectrogram:
    return apply_masks(spec, draw_masks(spec.bands, spec.frames, cfg, rng))


def mixup(a: tuple[Spectrogram, np.ndarray], b: tuple[Spectrogram, np.ndarray], alpha: float,
          rng: np.random.Generator | None = None, lam: float | None = None):
    """Convex combination of two (spectrogram, labels) pairs.

    Returns ``(spectrogram, labels, lam)`` with lam ~ Beta(alpha, alpha) unless
    ``lam`` is given.
    """
    (xa, ya), (xb, yb) = a, b
    ya, yb = np.asarray(ya, dtype=float), np.asarray(yb, dtype=float)
    if xa.values.shape != xb.values.shape:
        raise ValueError(f"mixup needs equal shapes, got {xa.values.shape} and {xb.values.shape}")
    if ya.shape != yb.shape:
        raise ValueError(f"mixup needs equal label lengths, got {ya.shape} and {yb.shape}")
    if lam is None:
        if alpha <= 0:
            raise ValueError(f"mixup alpha must be > 0, got {alpha}")
        rng = rng if rng is not None else np.random.default_rng()
        lam = float(rng.beta(alpha, alpha))
    x = _convex(lam, xa.values, xb.values)
    y = _convex(lam, ya, yb)
    return xa.replace(x), y, lam


def _convex(lam, a, b):
    out = lam * a + (1.0 - lam) * b
    return np.clip(out, np.minimum(a, b), np.maximum(a, b)).astype(np.result_type(a, b), copy=False)


def _geometric(spec: Spectrogram, cfg: AugmentConfig, target_frames: int, rng) -> Spectrogram:
    lo, hi = cfg.scale_range
    factor = float(rng.uniform(lo, hi))
    spec = random_scale(spec, factor)
    spec = pad_or_crop(spec, target_frames, "train" if cfg.crop_enabled else "eval", rng)
    return spec_augment(spec, cfg, rng)


def augment_pipeline(sample: tuple[Spectrogram, np.ndarray], peer: tuple[Spectrogram, np.ndarray] | None,
                     cfg: AugmentConfig, target_frames: int, rng: np.random.Generator):
    """scale -> crop/pad -> masks -> mixup with ``peer`` (same preprocessing, own stream)."""
    spec, labels = sample
    peer_rng = np.random.default_rng(rng.integers(1 << 63))
    out = _geometric(spec, cfg, target_frames, rng)
    labels = np.asarray(labels, dtype=float)
    if cfg.mixup_alpha > 0 and peer is not None:
        peer_spec = _geometric(peer[0], cfg, target_frames, peer_rng)
        out, labels, _ = mixup((out, labels), (peer_spec, peer[1]), cfg.mixup_alpha, rng)
    return out, labels
