"""Speckle-robust gradient features and baseline MIM targets.

The central operator is the gradient by ratio: for every pixel, the mean
amplitude of the half-window on one side is divided by the mean of the
opposite half-window and the log of that ratio is taken.  Because speckle is
multiplicative, a global gain cancels in the ratio and homogeneous regions
give values close to zero regardless of brightness.

Conventions
-----------
* Arrays are indexed ``[row, col]``; "horizontal" compares the left and right
  halves (columns), "vertical" compares the upper and lower halves (rows).
* ``g_h = log(mean_left / mean_right)`` and ``g_v = log(mean_up / mean_down)``.
  The sign therefore points *against* increasing brightness.
* Borders use mirror padding (``numpy.pad(mode="reflect")``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InputError, ParameterError

DEFAULT_SCALES = (9, 13, 17)
TARGET_KINDS = ("mgf", "pixel", "lowpass", "hog", "sarhog")
_WEIGHTINGS = ("box", "exponential")


@dataclass(frozen=True)
class SarImage:
    """Single-channel amplitude image with optional acquisition metadata.

    ``meta`` may hold keys such as ``dataset``, ``resolution_m``, ``band``,
    ``polarization`` and ``source``; it never influences any computation.
    """

    pixels: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InputError(f"expected a non-empty 2-D amplitude grid, got shape {px.shape}")
        px = px.astype(np.float64, copy=False)
        if not np.all(np.isfinite(px)):
            raise InputError("image contains non-finite pixels")
        if np.any(px < 0):
            raise InputError("amplitude image contains negative pixels")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class GradientPair:
    g_h: np.ndarray
    g_v: np.ndarray
    scale_r: int | None = None


@dataclass(frozen=True)
class FeatureStack:
    """``H x W x C`` target tensor with one name per channel."""

    values: np.ndarray
    channel_names: tuple[str, ...]
    kind: str

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != len(self.channel_names):
            raise InputError(
                f"values shape {self.values.shape} does not match {len(self.channel_names)} channel names"
            )
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def num_channels(self):
        return self.values.shape[2]


def as_pixels(image) -> np.ndarray:
    """Validated float64 pixel array from a ``SarImage`` or array-like."""
    if isinstance(image, SarImage):
        return image.pixels
    return SarImage(np.asarray(image)).pixels


def positivity_floor(pixels: np.ndarray) -> float:
    mean = float(pixels.mean())
    return 1e-6 * mean if mean > 0 else 1e-6


def clamp_positive(pixels: np.ndarray) -> np.ndarray:
    """Clamp amplitudes to ``1e-6 * mean`` so ratios and logs stay finite."""
    return np.maximum(pixels, positivity_floor(pixels))


@dataclass(frozen=True)
class RatioWindows:
    """The four half-window kernels for scale ``r``.

    Each kernel is ``(2r+1) x (2r+1)``; the centre row (for up/down) or centre
    column (for left/right) carries zero weight.
    """

    r: int
    weighting: str = "box"
    decay: float | None = None

    def __post_init__(self):
        _check_scale(self.r)
        if self.weighting not in _WEIGHTINGS:
            raise ParameterError(f"weighting must be one of {_WEIGHTINGS}, got {self.weighting!r}")

    def profiles(self):
        """1-D profiles ``(full, first_half, second_half)`` of length ``2r+1``."""
        r = self.r
        offsets = np.arange(-r, r + 1)
        if self.weighting == "box":
            full = np.ones(2 * r + 1)
        else:
            decay = self.decay if self.decay is not None else r / 2.0
            full = np.exp(-np.abs(offsets) / decay)
        first = np.where(offsets < 0, full, 0.0)
        second = np.where(offsets > 0, full, 0.0)
        return full, first, second

    def kernels(self):
        """Dense kernels ``{"left", "right", "up", "down"}``, each summing to one."""
        full, first, second = self.profiles()
        out = {
            "left": np.outer(full, first),
            "right": np.outer(full, second),
            "up": np.outer(first, full),
            "down": np.outer(second, full),
        }
        return {k: v / v.sum() for k, v in out.items()}


def _check_scale(r):
    if int(r) != r or r < 1:
        raise ParameterError(f"window scale r must be an integer >= 1, got {r!r}")


def _slice(x, start, stop, axis):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def _window_sums(x, length, axis):
    # sums of `length` consecutive samples along `axis`; output shrinks by length-1.
    # Shifted adds (not cumsum differences) keep the summation order identical at
    # every position, so constant inputs give exactly equal sums
    n = x.shape[axis] - length + 1
    out = _slice(x, 0, n, axis).copy()
    for k in range(1, length):
        out += _slice(x, k, k + n, axis)
    return out


def _box_half_means(px, r, axis):
    pad = [(0, 0)] * (px.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(px, pad, mode="reflect")
    strip = _window_sums(padded, 2 * r + 1, -3 - axis)
    halves = _window_sums(strip, r, axis)
    n = px.shape[axis]
    # halves[j] covers padded indices j .. j+r-1, i.e. original offsets j-r .. j-1
    norm = float(r * (2 * r + 1))
    return _slice(halves, 0, n, axis) / norm, _slice(halves, r + 1, r + 1 + n, axis) / norm


def _half_means(px, windows: RatioWindows, axis):
    # axis=-1: halves split along columns (left/right); axis=-2: rows (up/down)
    if windows.weighting == "box":
        return _box_half_means(px, windows.r, axis)
    full, first, second = windows.profiles()
    across = -3 - axis
    smoothed = ndimage.correlate1d(px, full, axis=across, mode="mirror")
    m1 = ndimage.correlate1d(smoothed, first, axis=axis, mode="mirror")
    m2 = ndimage.correlate1d(smoothed, second, axis=axis, mode="mirror")
    norm = full.sum() * first.sum()
    return m1 / norm, m2 / norm


def area_means(image, r, direction="horizontal", weighting="box", decay=None):
    """Means of the two opposite half-windows around every pixel.

    Returns ``(m1, m2)``: left/right for ``direction="horizontal"`` and
    up/down for ``direction="vertical"``.  The image is clamped to a small
    positive floor first so both means are strictly positive.
    """
    px = clamp_positive(as_pixels(image))
    windows = RatioWindows(r, weighting, decay)
    if direction == "horizontal":
        return _half_means(px, windows, axis=-1)
    if direction == "vertical":
        return _half_means(px, windows, axis=-2)
    raise ParameterError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")


def ratio_gradient(image, r, weighting="box", decay=None) -> GradientPair:
    """Horizontal and vertical log-ratio gradients at window scale ``r``."""
    px = clamp_positive(as_pixels(image))
    windows = RatioWindows(r, weighting, decay)
    left, right = _half_means(px, windows, axis=-1)
    up, down = _half_means(px, windows, axis=-2)
    return GradientPair(np.log(left / right), np.log(up / down), int(r))


def gradient_magnitude(pair: GradientPair) -> np.ndarray:
    g_h = np.asarray(pair.g_h, dtype=np.float64)
    g_v = np.asarray(pair.g_v, dtype=np.float64)
    if g_h.shape != g_v.shape:
        raise InputError(f"gradient components differ in shape: {g_h.shape} vs {g_v.shape}")
    if not (np.all(np.isfinite(g_h)) and np.all(np.isfinite(g_v))):
        raise InputError("gradient pair contains non-finite values")
    return np.sqrt(g_h * g_h + g_v * g_v)


def mgf(image, scales: Sequence[int] = DEFAULT_SCALES, weighting="box", decay=None) -> FeatureStack:
    """Multi-scale gradient feature: one ratio-gradient magnitude channel per scale."""
    scales = list(scales)
    if not scales:
        raise ParameterError("mgf needs at least one window scale")
    px = as_pixels(image)
    if min(px.shape) < 2:
        raise InputError(f"mgf needs an image of at least 2x2 pixels, got {px.shape}")
    channels = [gradient_magnitude(ratio_gradient(px, r, weighting, decay)) for r in scales]
    return FeatureStack(np.stack(channels, axis=-1), tuple(f"gm_r{r}" for r in scales), "mgf")


def mgf_batch(images, scales: Sequence[int] = DEFAULT_SCALES, weighting="box", decay=None) -> np.ndarray:
    """:func:`mgf` over a ``(B, H, W)`` stack, returned as ``(B, H, W, C)``.

    Each image is clamped with its own floor, so slice ``b`` equals
    ``mgf(images[b]).values`` up to floating-point summation order.
    """
    px = np.asarray(images, dtype=np.float64)
    if px.ndim != 3 or min(px.shape[1:]) < 2:
        raise InputError(f"mgf_batch expects (B, H, W) with H, W >= 2, got {px.shape}")
    if not np.all(np.isfinite(px)) or np.any(px < 0):
        raise InputError("image batch must be finite and non-negative")
    scales = list(scales)
    if not scales:
        raise ParameterError("mgf needs at least one window scale")
    means = px.mean(axis=(1, 2), keepdims=True)
    px = np.maximum(px, np.where(means > 0, 1e-6 * means, 1e-6))
    out = np.empty(px.shape + (len(scales),))
    for j, r in enumerate(scales):
        windows = RatioWindows(r, weighting, decay)
        left, right = _half_means(px, windows, axis=-1)
        up, down = _half_means(px, windows, axis=-2)
        g_h, g_v = np.log(left / right), np.log(up / down)
        out[..., j] = np.sqrt(g_h * g_h + g_v * g_v)
    return out


def diff_gradient(image, normalize=True) -> GradientPair:
    """Differential gradients, optionally divided by the local 3x3 mean.

    Same sign convention as :func:`ratio_gradient` (positive where brightness
    decreases along the axis).  With ``normalize=False`` the raw slopes are
    returned, so a ramp ``I = x`` gives ``g_h = -1`` everywhere.
    """
    px = as_pixels(image)
    if min(px.shape) < 2:
        raise InputError(f"diff_gradient needs at least 2x2 pixels, got {px.shape}")
    d_row, d_col = np.gradient(px)
    g_h, g_v = -d_col, -d_row
    if normalize:
        local = ndimage.uniform_filter(px, size=3, mode="mirror") + positivity_floor(px)
        g_h, g_v = g_h / local, g_v / local
    return GradientPair(g_h, g_v, None)


def orientation_histograms(magnitude, orientation, cell_size=8, bins=9, normalize=True):
    """Per-cell histograms of unsigned orientation, weighted by magnitude.

    ``orientation`` is in radians; it is folded into ``[0, pi)`` and hard
    binned.  Returns ``(cells_y, cells_x, bins)``; partial edge cells are kept.
    """
    if cell_size < 1 or bins < 1:
        raise ParameterError("cell_size and bins must be positive")
    h, w = magnitude.shape
    folded = np.mod(orientation, np.pi)
    idx = np.minimum((folded / np.pi * bins).astype(np.int64), bins - 1)
    cy, cx = -(-h // cell_size), -(-w // cell_size)
    cell_id = (np.arange(h)[:, None] // cell_size) * cx + (np.arange(w)[None, :] // cell_size)
    flat = (cell_id * bins + idx).ravel()
    hist = np.bincount(flat, weights=magnitude.ravel(), minlength=cy * cx * bins)
    hist = hist.reshape(cy, cx, bins)
    if normalize:
        hist = hist / np.sqrt(np.sum(hist * hist, axis=-1, keepdims=True) + 1e-12)
    return hist


def _replicate_cells(hist, shape, cell_size):
    up = np.repeat(np.repeat(hist, cell_size, axis=0), cell_size, axis=1)
    return up[: shape[0], : shape[1]]


def hog_features(image, cell_size=8, bins=9, normalize=True) -> FeatureStack:
    px = as_pixels(image)
    d_row, d_col = np.gradient(px)
    mag = np.hypot(d_col, d_row)
    hist = orientation_histograms(mag, np.arctan2(d_row, d_col), cell_size, bins, normalize)
    names = tuple(f"hog_b{b}" for b in range(bins))
    return FeatureStack(_replicate_cells(hist, px.shape, cell_size), names, "hog")


def sarhog_features(image, scales=DEFAULT_SCALES, cell_size=8, bins=9, normalize=True,
                    weighting="box", decay=None) -> FeatureStack:
    """HOG whose gradients come from the ratio operator, one block per scale."""
    px = as_pixels(image)
    scales = list(scales)
    if not scales:
        raise ParameterError("sarhog needs at least one window scale")
    blocks, names = [], []
    for r in scales:
        pair = ratio_gradient(px, r, weighting, decay)
        mag = gradient_magnitude(pair)
        # g_h, g_v point against brightness growth; orientation is unsigned so the sign is irrelevant
        hist = orientation_histograms(mag, np.arctan2(pair.g_v, pair.g_h), cell_size, bins, normalize)
        blocks.append(_replicate_cells(hist, px.shape, cell_size))
        names.extend(f"sarhog_r{r}_b{b}" for b in range(bins))
    return FeatureStack(np.concatenate(blocks, axis=-1), tuple(names), "sarhog")


def baseline_target(image, kind, **params) -> FeatureStack:
    """Non-MGF regression targets: ``pixel``, ``lowpass``, ``hog`` or ``sarhog``."""
    px = as_pixels(image)
    if kind == "pixel":
        return FeatureStack(px.copy()[..., None], ("pixel",), "pixel")
    if kind == "lowpass":
        sigma = float(params.get("sigma", 2.0))
        if sigma < 0:
            raise ParameterError("lowpass sigma must be >= 0")
        blurred = ndimage.gaussian_filter(px, sigma=sigma, mode="mirror")
        return FeatureStack(blurred[..., None], ("lowpass",), "lowpass")
    if kind == "hog":
        return hog_features(px, **params)
    if kind == "sarhog":
        return sarhog_features(px, **params)
    raise ParameterError(f"unknown baseline target kind {kind!r}")


def target_features(image, kind="mgf", scales=DEFAULT_SCALES, **params) -> FeatureStack:
    """Dispatch to :func:`mgf` or :func:`baseline_target` by ``kind``."""
    if kind == "mgf":
        return mgf(image, scales, **params)
    if kind == "sarhog":
        params.setdefault("scales", scales)
    if kind not in TARGET_KINDS:
        raise ParameterError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    return baseline_target(image, kind, **params)
