"""
Curating a mixed SAR collection
===============================

Large scenes are cut into overlapping tiles, small chips pass through
untouched, and class counts are equalised before pre-training.  Everything
lives in a JSONL manifest, so each step reads one manifest and writes the next.
"""

from pathlib import Path

import numpy as np

from sarmim.datakit import CorpusManifest, ManifestRecord, TilePolicy, rebalance, slice_manifest
from sarmim.imageio import write_png16, write_tiff16

root = Path("demo_out/curation")
(root / "raw").mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

# one wide-area scene and a handful of vehicle chips
write_tiff16(root / "raw/scene.tif", rng.integers(100, 4000, (1200, 1500)).astype(np.uint16))
records = [ManifestRecord("raw/scene.tif", "SAR-AIRcraft", "unlabeled")]
for i in range(7):
    name = f"raw/chip{i}.png"
    write_png16(root / name, rng.integers(100, 4000, (96, 96)).astype(np.uint16))
    records.append(ManifestRecord(name, "MSTAR", "train", "tank" if i < 5 else "truck"))
manifest = CorpusManifest(records, root)
manifest.write(root / "manifest.jsonl")

# side > 1000 px is tiled at 512 with 64 px overlap; the chips are copied
tiled = slice_manifest(manifest, root / "tiled", TilePolicy())
scene_tiles = [r for r in tiled.records if r.parent]
print(f"{len(scene_tiles)} tiles from the scene, origins of the first three:",
      [r.tile_origin for r in scene_tiles[:3]])

# 5 tanks vs 2 trucks; oversampling repeats trucks until both reach 5
labelled = tiled.filter(split="train")
print("before:", dict(labelled.class_counts()))
print("after: ", dict(rebalance(labelled, "oversample-to-max", seed=0).class_counts()))
