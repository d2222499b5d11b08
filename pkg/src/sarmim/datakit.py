"""Corpus manifests, ingestion, large-image slicing, rebalancing and pseudo-colour export.

A manifest is a JSONL file with one record per image.  Paths are relative to
the directory holding the manifest.  Every line carries ``schema_version``.

Record keys::

    schema_version  int, currently 1
    path            image path relative to the manifest directory
    dataset         source dataset id
    split           "train" | "test" | "unlabeled"
    class           optional class name
    resolution_m    optional ground resolution in metres
    band            optional radar band, e.g. "X"
    polarization    optional, e.g. "HH"
    parent          optional source image path (tiles only)
    tile_origin     optional [row, col] of the tile in the parent (tiles only)
    meta            optional free-form object
"""

from __future__ import annotations

import json
import logging
import shutil
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, InputError, ManifestError, PolicyError
from .features import as_pixels
from .imageio import IMAGE_SUFFIXES, read_image, write_png16

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "test", "unlabeled")
_KEYS = {"schema_version", "path", "dataset", "split", "class", "resolution_m", "band",
         "polarization", "parent", "tile_origin", "meta"}


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    dataset: str
    split: str
    cls: str | None = None
    resolution_m: float | None = None
    band: str | None = None
    polarization: str | None = None
    parent: str | None = None
    tile_origin: tuple[int, int] | None = None
    meta: dict | None = None

    def to_json(self) -> str:
        out = {"schema_version": SCHEMA_VERSION, "path": self.path, "dataset": self.dataset,
               "split": self.split}
        optional = {"class": self.cls, "resolution_m": self.resolution_m, "band": self.band,
                    "polarization": self.polarization, "parent": self.parent,
                    "tile_origin": list(self.tile_origin) if self.tile_origin is not None else None,
                    "meta": self.meta}
        out.update({k: v for k, v in optional.items() if v is not None})
        return json.dumps(out, sort_keys=True)

    @classmethod
    def from_json(cls, line: str, lineno: int = 0) -> "ManifestRecord":
        where = f"line {lineno}" if lineno else "record"
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: invalid JSON ({exc.msg})") from exc
        if not isinstance(raw, dict):
            raise ManifestError(f"{where}: expected a JSON object")
        unknown = sorted(set(raw) - _KEYS)
        if unknown:
            raise ManifestError(f"{where}: unknown keys {unknown}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ManifestError(f"{where}: unsupported schema_version {version!r}")
        for key in ("path", "dataset", "split"):
            if not isinstance(raw.get(key), str) or not raw[key]:
                raise ManifestError(f"{where}: missing or empty {key!r}")
        if raw["split"] not in SPLITS:
            raise ManifestError(f"{where}: split {raw['split']!r} is not one of {SPLITS}")
        origin = raw.get("tile_origin")
        if origin is not None:
            if len(origin) != 2:
                raise ManifestError(f"{where}: tile_origin must be [row, col]")
            origin = (int(origin[0]), int(origin[1]))
        if (origin is None) != (raw.get("parent") is None):
            raise ManifestError(f"{where}: tile records need both 'parent' and 'tile_origin'")
        return cls(path=raw["path"], dataset=raw["dataset"], split=raw["split"], cls=raw.get("class"),
                   resolution_m=raw.get("resolution_m"), band=raw.get("band"),
                   polarization=raw.get("polarization"), parent=raw.get("parent"),
                   tile_origin=origin, meta=raw.get("meta"))


@dataclass
class CorpusManifest:
    """Ordered record list plus the directory that relative paths resolve against."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)
    problems: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.records = list(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, CorpusManifest) and self.records == other.records

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def loads(cls, text: str, root=".") -> "CorpusManifest":
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.strip():
                records.append(ManifestRecord.from_json(line, lineno))
        return cls(records, root)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), root=path.parent)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def validate(self):
        missing = [r.path for r in self.records if not self.resolve(r).exists()]
        if missing:
            raise ManifestError(f"{len(missing)} manifest paths do not exist, e.g. {missing[:3]}", missing)

    def filter(self, split=None, classes=None) -> "CorpusManifest":
        keep = [r for r in self.records
                if (split is None or r.split in _as_tuple(split))
                and (classes is None or r.cls in classes)]
        return CorpusManifest(keep, self.root)

    def class_counts(self) -> Counter:
        return Counter(r.cls for r in self.records)

    def classes(self) -> list[str]:
        return sorted({r.cls for r in self.records if r.cls is not None})

    def load_images(self) -> np.ndarray:
        """All images stacked as float32 ``(N, H, W)``; sizes must agree."""
        arrays = [read_image(self.resolve(r)).pixels for r in self.records]
        if not arrays:
            raise DegenerateInputError("manifest selects no images")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise InputError(f"images have differing sizes {sorted(shapes)[:4]}")
        return np.stack(arrays).astype(np.float32)

    def labels(self, classes=None) -> np.ndarray:
        """Integer labels indexing ``classes`` (default: sorted class names)."""
        classes = list(classes if classes is not None else self.classes())
        lookup = {c: i for i, c in enumerate(classes)}
        missing = [r.path for r in self.records if r.cls not in lookup]
        if missing:
            raise ManifestError(f"{len(missing)} records lack a known class", missing)
        return np.array([lookup[r.cls] for r in self.records], dtype=np.int64)


def _as_tuple(x):
    return (x,) if isinstance(x, str) else tuple(x)


def read_manifest(path) -> CorpusManifest:
    return CorpusManifest.read(path)


def ingest(manifest_in, out_dir, max_failure_rate=0.10) -> CorpusManifest:
    """Validate every image of ``manifest_in`` and copy it into ``out_dir``.

    Unreadable or invalid files are skipped and reported in
    ``out_dir/ingest_errors.jsonl`` (and on ``manifest.problems``).  If more
    than ``max_failure_rate`` of the records fail, :class:`ManifestError` is
    raised after the report is written.  Files are copied byte for byte, so
    integer amplitudes are preserved exactly.
    """
    if not isinstance(manifest_in, CorpusManifest):
        manifest_in = CorpusManifest.read(manifest_in)
    if not manifest_in.records:
        raise DegenerateInputError("empty corpus: the input manifest has no records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records, problems = [], []
    for lineno, rec in enumerate(manifest_in.records, start=1):
        src = manifest_in.resolve(rec)
        try:
            if src.suffix.lower() not in IMAGE_SUFFIXES:
                raise InputError(f"unsupported format {src.suffix!r}")
            image = read_image(src)
            if image.meta["dtype"] not in ("uint8", "uint16"):
                raise InputError(f"expected 8- or 16-bit integer pixels, got {image.meta['dtype']}")
            rel = Path("images") / rec.dataset / f"{lineno:06d}_{src.name}"
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, out_dir / rel)
        except (InputError, OSError) as exc:
            problems.append({"line": lineno, "path": rec.path, "error": str(exc)})
            log.warning("ingest: line %d (%s) skipped: %s", lineno, rec.path, exc)
            continue
        records.append(replace(rec, path=rel.as_posix()))

    if problems:
        with open(out_dir / "ingest_errors.jsonl", "w", encoding="utf-8") as fh:
            for p in problems:
                fh.write(json.dumps(p, sort_keys=True) + "\n")
    if len(problems) > max_failure_rate * len(manifest_in.records):
        raise ManifestError(
            f"ingest aborted: {len(problems)}/{len(manifest_in.records)} records failed", problems)
    out = CorpusManifest(records, out_dir, problems)
    out.write(out_dir / "manifest.jsonl")
    return out


# Known crop sizes per dataset; anything else uses the policy defaults.
DATASET_TILE_OVERRIDES = {
    "SAR-AIRcraft": (512, 64),
    "Sandia MiniSAR": (224, 32),
}


@dataclass(frozen=True)
class TilePolicy:
    threshold: int = 1000
    tile: int = 512
    overlap: int = 64
    overrides: dict = field(default_factory=lambda: dict(DATASET_TILE_OVERRIDES))

    def for_dataset(self, dataset=None) -> "TilePolicy":
        if dataset in self.overrides:
            tile, overlap = self.overrides[dataset]
            return TilePolicy(self.threshold, tile, overlap, self.overrides)
        return self

    def validate(self):
        if not 0 <= self.overlap < self.tile <= self.threshold:
            raise PolicyError(
                f"tile policy needs 0 <= overlap < tile <= threshold, got "
                f"overlap={self.overlap}, tile={self.tile}, threshold={self.threshold}")


def tile_starts(n, tile, stride):
    """Start offsets along one axis; the last tile is shifted inward to end at ``n``."""
    if tile > n:
        raise PolicyError(f"tile size {tile} exceeds image extent {n}")
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


@dataclass(frozen=True)
class Tile:
    pixels: np.ndarray
    origin: tuple[int, int]


def slice_large(image, policy: TilePolicy = TilePolicy(), dataset=None) -> list[Tile]:
    """Cut an image larger than ``policy.threshold`` into overlapping tiles.

    Images whose longest side is within the threshold come back as a single
    passthrough tile at origin ``(0, 0)``.
    """
    px = as_pixels(image)
    policy = policy.for_dataset(dataset)
    policy.validate()
    h, w = px.shape
    if max(h, w) <= policy.threshold:
        return [Tile(px, (0, 0))]
    stride = policy.tile - policy.overlap
    rows = tile_starts(h, policy.tile, stride)
    cols = tile_starts(w, policy.tile, stride)
    return [Tile(px[r:r + policy.tile, c:c + policy.tile], (r, c)) for r in rows for c in cols]


def slice_manifest(manifest: CorpusManifest, out_dir, policy: TilePolicy = TilePolicy()) -> CorpusManifest:
    """Apply :func:`slice_large` to every record, writing tiles as 16-bit PNG."""
    out_dir = Path(out_dir)
    records = []
    for rec in manifest.records:
        image = read_image(manifest.resolve(rec))
        tiles = slice_large(image, policy, rec.dataset)
        if len(tiles) == 1 and tiles[0].origin == (0, 0) and tiles[0].pixels.shape == image.shape:
            dest = out_dir / "images" / rec.path
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(manifest.resolve(rec), dest)
            records.append(replace(rec, path=Path("images", rec.path).as_posix()))
            continue
        stem = Path(rec.path).with_suffix("")
        for t in tiles:
            rel = Path("tiles") / f"{stem.as_posix()}_r{t.origin[0]}_c{t.origin[1]}.png"
            if t.pixels.max() > 65535:
                raise InputError(f"{rec.path}: values exceed the 16-bit range of PNG tiles")
            write_png16(out_dir / rel, t.pixels.astype(np.uint16))
            records.append(replace(rec, path=rel.as_posix(), parent=rec.path, tile_origin=t.origin))
    out = CorpusManifest(records, out_dir)
    out.write(out_dir / "manifest.jsonl")
    return out


REBALANCE_STRATEGIES = ("none", "oversample-to-max", "undersample-to-min")


def rebalance(manifest: CorpusManifest, strategy="none", seed=0) -> CorpusManifest:
    """Equalise per-class record counts.

    ``oversample-to-max`` keeps every record and appends random duplicates of
    minority classes (flagged with ``meta["resampled"] = True``);
    ``undersample-to-min`` keeps a random subset of each class in original
    order.  ``none`` returns the manifest unchanged.
    """
    if strategy not in REBALANCE_STRATEGIES:
        raise InputError(f"unknown rebalance strategy {strategy!r}; expected one of {REBALANCE_STRATEGIES}")
    unlabeled = [(i, r.path) for i, r in enumerate(manifest.records) if r.cls is None]
    if unlabeled:
        raise ManifestError(f"{len(unlabeled)} records have no class label, e.g. {unlabeled[:3]}", unlabeled)
    if strategy == "none":
        return CorpusManifest(list(manifest.records), manifest.root)

    by_class = defaultdict(list)
    for i, r in enumerate(manifest.records):
        by_class[r.cls].append(i)
    rng = np.random.default_rng(seed)
    counts = {c: len(ix) for c, ix in by_class.items()}

    if strategy == "undersample-to-min":
        target = min(counts.values())
        keep = []
        for c in sorted(by_class):
            chosen = rng.choice(by_class[c], size=target, replace=False)
            keep.extend(int(i) for i in chosen)
        return CorpusManifest([manifest.records[i] for i in sorted(keep)], manifest.root)

    target = max(counts.values())
    records = list(manifest.records)
    for c in sorted(by_class):
        need = target - counts[c]
        pool = by_class[c]
        full, rest = divmod(need, len(pool))
        picks = list(pool) * full + [int(i) for i in rng.choice(pool, size=rest, replace=False)]
        for copy_no, i in enumerate(picks, start=1):
            src = manifest.records[i]
            meta = dict(src.meta or {}, resampled=True, copy=copy_no)
            records.append(replace(src, meta=meta))
    return CorpusManifest(records, manifest.root)


def pseudo_color(image, colormap="viridis", low_pct=1.0, high_pct=99.0, compression=100.0):
    """Map amplitudes to an 8-bit RGB image for display.

    Amplitudes are clipped to the ``[low_pct, high_pct]`` percentiles,
    log-compressed with ``log1p(k t) / log1p(k)`` and looked up in a 256-entry
    colormap.  Returns ``(rgb, index)`` where ``index`` is the colormap index
    per pixel.
    """
    import matplotlib

    px = as_pixels(image)
    lo, hi = np.percentile(px, [low_pct, high_pct])
    if hi > lo:
        t = (np.clip(px, lo, hi) - lo) / (hi - lo)
        v = np.log1p(compression * t) / np.log1p(compression)
    else:
        v = np.zeros_like(px)
    index = np.rint(v * 255).astype(np.uint8)
    lut = (matplotlib.colormaps[colormap](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)
    return lut[index], index
