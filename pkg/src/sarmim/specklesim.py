"""Synthetic SAR-like scenes with multiplicative gamma speckle.

Scenes are a constant background reflectivity with one target region whose
reflectivity is multiplied by a contrast factor.  Speckle is drawn per pixel
from ``Gamma(L, 1/L)`` (unit mean, variance ``1/L``).

Every image owns an RNG stream derived from ``(seed, index)`` through
:class:`numpy.random.SeedSequence`, so corpora are identical whether they are
generated serially or by several workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, SpecError
from .features import SarImage, as_pixels

SHAPES = ("rectangle", "ellipse", "L", "two-blob")
SIZE_BINS = ("small", "large")
MAX_CLASSES = len(SHAPES) * len(SIZE_BINS)
# target extent (pixels, longest side) per size bin, as a fraction of the image side
SIZE_RANGES = {"small": (0.18, 0.28), "large": (0.40, 0.55)}


def class_id_for(shape: str, size_bin: str) -> int:
    """Label of a ``(shape, size-bin)`` pair: ``shape_index * 2 + size_index``."""
    if shape not in SHAPES or size_bin not in SIZE_BINS:
        raise SpecError(f"unknown shape/size bin {shape!r}/{size_bin!r}")
    return SHAPES.index(shape) * len(SIZE_BINS) + SIZE_BINS.index(size_bin)


def class_name(class_id: int) -> str:
    shape, size_bin = SHAPES[class_id // len(SIZE_BINS)], SIZE_BINS[class_id % len(SIZE_BINS)]
    return f"{shape}-{size_bin}"


@dataclass(frozen=True)
class Target:
    shape: str
    position: tuple[float, float]  # centre (row, col) in pixels
    size: tuple[float, float]  # full extent (length, width) in pixels
    orientation: float = 0.0  # radians, counter-clockwise
    contrast: float = 4.0
    size_bin: str = "small"


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int]
    background_reflectivity: float = 1.0
    targets: tuple[Target, ...] = ()
    num_classes: int = MAX_CLASSES

    @property
    def class_id(self) -> int:
        if not self.targets:
            raise SpecError("a scene without targets has no class")
        t = self.targets[0]
        return class_id_for(t.shape, t.size_bin)


@dataclass(frozen=True)
class SpeckleParams:
    looks: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.looks) != self.looks or self.looks < 1:
            raise ParameterError(f"number of looks must be an integer >= 1, got {self.looks!r}")


def speckle_factor(shape, looks, rng: np.random.Generator) -> np.ndarray:
    if looks < 1:
        raise ParameterError(f"number of looks must be >= 1, got {looks!r}")
    return rng.gamma(shape=float(looks), scale=1.0 / looks, size=shape)


def gamma_speckle(clean, params: SpeckleParams, domain="intensity") -> SarImage:
    """Multiply ``clean`` by i.i.d. ``Gamma(L, 1/L)`` speckle.

    ``domain="intensity"`` returns ``clean * S``.  ``domain="amplitude"``
    treats ``clean`` as amplitude, speckles the intensity ``clean**2`` and
    returns ``sqrt(clean**2 * S)``.
    """
    px = as_pixels(clean)
    rng = np.random.default_rng(params.seed)
    s = speckle_factor(px.shape, params.looks, rng)
    if domain == "intensity":
        out = px * s
    elif domain == "amplitude":
        out = px * np.sqrt(s)
    else:
        raise ParameterError(f"domain must be 'intensity' or 'amplitude', got {domain!r}")
    meta = dict(clean.meta) if isinstance(clean, SarImage) else {}
    meta["looks"] = params.looks
    return SarImage(out, meta)


def _local_coords(h, w, target: Target):
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = rows - target.position[0], cols - target.position[1]
    c, s = math.cos(target.orientation), math.sin(target.orientation)
    # u along the target length axis, v across it
    u = c * dx - s * dy
    v = s * dx + c * dy
    return u, v


def target_mask(h, w, target: Target) -> np.ndarray:
    """Boolean support of ``target`` on an ``h x w`` grid."""
    u, v = _local_coords(h, w, target)
    length, width = target.size
    a, b = length / 2.0, width / 2.0
    if target.shape == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if target.shape == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if target.shape == "L":
        # long arm along u plus a short arm at the u=-a end, both of thickness t
        t = max(width / 3.0, 1.0)
        arm1 = (np.abs(u) <= a) & (v >= -b) & (v <= -b + t)
        arm2 = (u >= -a) & (u <= -a + t) & (v >= -b) & (v <= b)
        return arm1 | arm2
    if target.shape == "two-blob":
        rad = max(min(a / 2.0, b), 1.0)
        d1 = (u + a / 2.0) ** 2 + v**2
        d2 = (u - a / 2.0) ** 2 + v**2
        return (d1 <= rad**2) | (d2 <= rad**2)
    raise SpecError(f"unknown target shape {target.shape!r}")


def _check_spec(spec: SceneSpec):
    h, w = spec.size
    if h < 1 or w < 1:
        raise SpecError(f"scene size must be positive, got {spec.size}")
    if not spec.background_reflectivity > 0:
        raise SpecError("background reflectivity must be positive")
    for t in spec.targets:
        if t.contrast < 1:
            raise SpecError(f"target contrast must be >= 1, got {t.contrast}")
        if t.shape not in SHAPES:
            raise SpecError(f"unknown target shape {t.shape!r}")
        half = math.hypot(t.size[0], t.size[1]) / 2.0
        r, c = t.position
        if r - half < 0 or c - half < 0 or r + half > h or c + half > w:
            raise SpecError(f"target at {t.position} with size {t.size} leaves the {h}x{w} image")
    if spec.targets and not 0 <= spec.class_id < spec.num_classes:
        raise SpecError(f"class id {spec.class_id} outside [0, {spec.num_classes})")


def render_reflectivity(spec: SceneSpec) -> np.ndarray:
    _check_spec(spec)
    h, w = spec.size
    refl = np.full((h, w), float(spec.background_reflectivity))
    for t in spec.targets:
        refl[target_mask(h, w, t)] *= t.contrast
    return refl


def synth_scene(spec: SceneSpec, params: SpeckleParams):
    """Render ``spec`` and apply amplitude-domain speckle; returns ``(image, class_id)``."""
    refl = render_reflectivity(spec)
    image = gamma_speckle(SarImage(refl, {"dataset": "synthetic"}), params, domain="amplitude")
    return image, (spec.class_id if spec.targets else -1)


def random_scene_spec(rng: np.random.Generator, class_id: int, size=(64, 64),
                      contrast_range=(3.0, 10.0), num_classes=MAX_CLASSES) -> SceneSpec:
    """Draw a random one-target scene of the given class."""
    if not 0 <= class_id < num_classes <= MAX_CLASSES:
        raise SpecError(f"class id {class_id} outside [0, {num_classes})")
    shape = SHAPES[class_id // len(SIZE_BINS)]
    size_bin = SIZE_BINS[class_id % len(SIZE_BINS)]
    h, w = size
    side = min(h, w)
    lo, hi = SIZE_RANGES[size_bin]
    length = rng.uniform(lo, hi) * side
    width = length * rng.uniform(0.45, 0.7)
    half = math.hypot(length, width) / 2.0 + 1.0
    position = (rng.uniform(half, h - half), rng.uniform(half, w - half))
    target = Target(
        shape=shape,
        position=position,
        size=(length, width),
        orientation=rng.uniform(0, math.pi),
        contrast=rng.uniform(*contrast_range),
        size_bin=size_bin,
    )
    background = float(np.exp(rng.uniform(np.log(200.0), np.log(1000.0))))
    return SceneSpec(size=(h, w), background_reflectivity=background, targets=(target,),
                     num_classes=num_classes)


def image_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


@dataclass
class CorpusConfig:
    num_images: int = 2000
    num_classes: int = 8
    size: int = 64
    looks: tuple[int, ...] = (1, 2, 4)
    test_fraction: float = 0.2
    seed: int = 0
    out_dir: str = "corpus"
    contrast_range: tuple[float, float] = (3.0, 10.0)
    kind: str = "sar"  # "sar" or "generic"
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.num_images < 1:
            raise ParameterError("num_images must be >= 1")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ParameterError(f"num_classes must be in [1, {MAX_CLASSES}]")
        if self.num_images % self.num_classes:
            raise ParameterError("num_images must be a multiple of num_classes for a balanced corpus")
        if not 0 <= self.test_fraction < 1:
            raise ParameterError("test_fraction must be in [0, 1)")
        if not self.looks or min(self.looks) < 1:
            raise ParameterError("looks must be a non-empty list of integers >= 1")
        if self.kind not in ("sar", "generic"):
            raise ParameterError(f"corpus kind must be 'sar' or 'generic', got {self.kind!r}")


def generic_image(rng: np.random.Generator, size=64) -> np.ndarray:
    """A speckle-free "natural" image: shaded polygons and ellipses over a smooth gradient.

    Used as the stand-in for generic (non-SAR) imagery in the first
    pre-training step.  Values are positive.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.5 + 0.3 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
    for _ in range(rng.integers(2, 6)):
        kind = SHAPES[rng.integers(0, len(SHAPES))]
        length = rng.uniform(0.15, 0.5) * size
        width = length * rng.uniform(0.3, 1.0)
        half = math.hypot(length, width) / 2.0
        centre = (rng.uniform(0, size), rng.uniform(0, size))
        t = Target(kind, centre, (length, width), rng.uniform(0, math.pi))
        shade = rng.uniform(0.1, 1.5) + 0.3 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
        mask = target_mask(size, size, t) if half > 0 else np.zeros((size, size), bool)
        img = np.where(mask, shade, img)
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.02, None)


def _render_record(cfg: CorpusConfig, index: int, class_id: int):
    rng = image_rng(cfg.seed, index)
    if cfg.kind == "generic":
        return generic_image(rng, cfg.size), {"kind": "generic"}
    spec = random_scene_spec(rng, class_id, (cfg.size, cfg.size), cfg.contrast_range, cfg.num_classes)
    looks = int(cfg.looks[rng.integers(0, len(cfg.looks))])
    image, label = synth_scene(spec, SpeckleParams(looks, int(rng.integers(0, 2**63))))
    assert label == class_id
    return image.pixels, {"looks": looks}


def to_uint16(pixels: np.ndarray, kind="sar") -> np.ndarray:
    if kind == "generic":
        pixels = pixels * 20000.0
    return np.clip(np.rint(pixels), 0, 65535).astype(np.uint16)


def make_corpus(config: CorpusConfig):
    """Render a balanced synthetic corpus to ``config.out_dir``.

    Writes ``images/NNNNN.png`` (16-bit grayscale) and ``manifest.jsonl``;
    returns the :class:`~sarmim.datakit.CorpusManifest`.  Classes are
    interleaved so that every prefix of the manifest is nearly balanced, and
    the last ``test_fraction`` of each class goes to the test split.
    """
    from .datakit import CorpusManifest, ManifestRecord
    from .imageio import write_png16

    config.validate()
    out = Path(config.out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc

    per_class = config.num_images // config.num_classes
    n_test = int(round(per_class * config.test_fraction))
    labels = [i % config.num_classes for i in range(config.num_images)]

    def work(index):
        pixels, meta = _render_record(config, index, labels[index])
        rel = f"images/{index:05d}.png"
        write_png16(out / rel, to_uint16(pixels, config.kind))
        return rel, meta

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, range(config.num_images)))
    else:
        results = [work(i) for i in range(config.num_images)]

    records = []
    for index, ((rel, meta), class_id) in enumerate(zip(results, labels)):
        rank = index // config.num_classes
        if config.kind == "generic":
            split, cls = "unlabeled", None
        else:
            split = "test" if rank >= per_class - n_test else "train"
            cls = class_name(class_id)
        records.append(ManifestRecord(
            path=rel,
            dataset=f"synthetic-{config.kind}",
            split=split,
            cls=cls,
            meta=dict(meta, index=index),
        ))
    manifest = CorpusManifest(records, root=out)
    manifest.write(out / "manifest.jsonl")
    return manifest
