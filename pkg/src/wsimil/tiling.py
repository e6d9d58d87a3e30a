"""Slide tiling, background filtering and per-patch normalization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_VALUE = 255
EPS_STD = 1e-6


@dataclass
class SlideImage:
    id: str
    pixels: np.ndarray  # (H, W) or (H, W, C), values in [0, 255]
    label: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim not in (2, 3) or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"slide {self.id!r}: image has zero or invalid dimensions "
                             f"{self.pixels.shape}")
        if self.pixels.ndim == 3 and self.pixels.shape[2] not in (1, 3):
            raise ValueError(f"slide {self.id!r}: expected 1 or 3 channels")
        if self.pixels.min() < 0 or self.pixels.max() > 255:
            raise ValueError(f"slide {self.id!r}: intensities outside [0, 255]")

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]


@dataclass
class Patch:
    slide_id: str
    grid_row: int
    grid_col: int
    pixels: np.ndarray  # (t, t) or (t, t, C)
    padded_fraction: float = 0.0


@dataclass
class TileFilterStats:
    intensities: list
    c_max: float
    threshold: float


def grid_shape(width: int, height: int, tile_size: int):
    return math.ceil(height / tile_size), math.ceil(width / tile_size)


def tile_image(image: SlideImage, tile_size: int = 224, pad_value=PAD_VALUE):
    """Cut the image into row-major tile_size tiles, padding the bottom/right edges."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    px = image.pixels
    rows, cols = grid_shape(image.width_px, image.height_px, tile_size)
    patches = []
    for r in range(rows):
        for c in range(cols):
            block = px[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            h, w = block.shape[:2]
            if (h, w) == (tile_size, tile_size):
                tile = block.copy()
            else:
                tile = np.full((tile_size, tile_size) + px.shape[2:], pad_value, dtype=px.dtype)
                tile[:h, :w] = block
            frac = 1.0 - (h * w) / (tile_size * tile_size)
            patches.append(Patch(image.id, r, c, tile, frac))
    return patches


def patch_intensity(patch: Patch) -> float:
    """Mean over all pixels and channels, padding included."""
    return float(np.mean(patch.pixels, dtype=np.float64))


def filter_background(patches, retain_ratio: float = 0.95):
    """Drop patches brighter than ``retain_ratio`` times the brightest patch.

    If every patch would be dropped, the darkest one (first on ties) is kept.
    """
    patches = list(patches)
    if not patches:
        raise ValueError("no patches to filter")
    if not 0 < retain_ratio <= 1:
        raise ValueError("retain_ratio must lie in (0, 1]")
    c = [patch_intensity(p) for p in patches]
    c_max = max(c)
    threshold = retain_ratio * c_max
    kept = [p for p, ci in zip(patches, c) if ci <= threshold]
    if not kept:
        kept = [patches[int(np.argmin(c))]]
    return kept, TileFilterStats(c, c_max, threshold)


def normalize_patch(patch) -> np.ndarray:
    """Zero mean, unit variance over the whole patch; constant patches map to zeros."""
    px = patch.pixels if isinstance(patch, Patch) else patch
    x = np.asarray(px, dtype=np.float64)
    return (x - x.mean()) / max(x.std(), EPS_STD)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_manifest(path):
    """JSON-lines manifest of {id, image_path, label}; relative paths resolve against the file."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = {"id", "image_path", "label"} - rec.keys()
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if rec["label"] not in (0, 1):
            raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
        img = Path(rec["image_path"])
        rec["image_path"] = str(img if img.is_absolute() else path.parent / img)
        records.append(rec)
    return records


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_slide(record) -> SlideImage:
    from PIL import Image

    with Image.open(record["image_path"]) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        pixels = np.asarray(im)
    return SlideImage(str(record["id"]), pixels, int(record["label"]))


def save_raster(path, pixels):
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def dump_patches(patches, out_dir):
    """Write tiles as ``<slide_id>_<row>_<col>.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in patches:
        save_raster(out_dir / f"{p.slide_id}_{p.grid_row}_{p.grid_col}.png", p.pixels)
