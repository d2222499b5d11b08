"""Single-channel augmentation for amplitude images and the shared input scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image


def sample_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Per-sample generator; the stream depends only on its coordinates, never on worker count."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index), int(stream)]))


def unit_mean(image: np.ndarray) -> np.ndarray:
    """Scale an amplitude image (or a ``(B, H, W)`` stack) to mean one per image."""
    x = np.asarray(image, dtype=np.float64)
    axes = (-2, -1)
    mean = x.mean(axis=axes, keepdims=True)
    return x / np.where(mean > 0, mean, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    output_size: int = 64
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip: float = 0.5
    contrast: float = 0.5


def random_resized_crop_box(rng, h, w, scale, ratio, attempts=10):
    """Crop box ``(top, left, height, width)`` following the usual area/aspect sampling."""
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to a centred crop with clamped aspect
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize_box(image: np.ndarray, box, size: int) -> np.ndarray:
    top, left, ch, cw = box
    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    out = im.resize((size, size), Image.BILINEAR, box=(left, top, left + cw, top + ch))
    return np.asarray(out, dtype=np.float64)


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Resized crop, horizontal flip and contrast jitter, then unit-mean scaling.

    Contrast jitter scales deviations from the image mean by a factor drawn
    from ``[1 - contrast, 1 + contrast]``; negative results are clipped to 0.
    """
    h, w = image.shape
    box = random_resized_crop_box(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
    view = resize_box(image, box, cfg.output_size)
    if rng.uniform() < cfg.hflip:
        view = view[:, ::-1]
    if cfg.contrast > 0:
        factor = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = view.mean()
        view = np.clip(mean + factor * (view - mean), 0.0, None)
    return unit_mean(np.ascontiguousarray(view))

