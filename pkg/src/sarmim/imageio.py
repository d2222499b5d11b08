"""Reading and writing amplitude images and feature archives."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import InputError
from .features import FeatureStack, SarImage

IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}


def read_image(path, meta=None) -> SarImage:
    """Load a single-channel 8- or 16-bit PNG/TIFF as a :class:`SarImage`.

    Stored integer values are cast to float64 unchanged, so 16-bit data
    round-trips exactly.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in (".tif", ".tiff"):
            arr = tifffile.imread(path)
        elif suffix == ".png":
            with Image.open(path) as im:
                if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
                    raise InputError(f"{path}: expected grayscale PNG, got mode {im.mode}")
                arr = np.asarray(im)
        else:
            raise InputError(f"{path}: unsupported image format {suffix!r}")
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"{path}: unreadable image ({exc})") from exc
    arr = np.squeeze(np.asarray(arr))
    if arr.ndim != 2:
        raise InputError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype.kind not in "ui" and arr.dtype.kind != "f":
        raise InputError(f"{path}: unsupported pixel type {arr.dtype}")
    info = {"source": str(path), "dtype": str(arr.dtype)}
    info.update(meta or {})
    return SarImage(arr.astype(np.float64), info)


def write_png16(path, pixels):
    arr = np.asarray(pixels)
    if arr.dtype != np.uint16:
        raise InputError(f"write_png16 expects uint16 data, got {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def write_tiff16(path, pixels):
    arr = np.asarray(pixels)
    if arr.dtype != np.uint16:
        raise InputError(f"write_tiff16 expects uint16 data, got {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tifffile.imwrite(path, arr)


def write_rgb_png(path, rgb):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_feature_stack(path, stack: FeatureStack, extra=None):
    """Save a feature stack as ``.npz`` with channel names and kind in a JSON header."""
    header = {"kind": stack.kind, "channel_names": list(stack.channel_names)}
    header.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, values=stack.values, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8))


def read_feature_stack(path):
    """Inverse of :func:`write_feature_stack`; returns ``(stack, header)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        stack = FeatureStack(data["values"], tuple(header["channel_names"]), header["kind"])
    return stack, header
