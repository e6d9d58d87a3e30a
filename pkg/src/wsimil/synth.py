"""Seeded synthetic bags and slides with known signal locations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from wsimil.pooling import Bag
from wsimil.tiling import SlideImage


@dataclass
class SynthSpec:
    n_bags: int = 300
    K: int = 50
    M: int = 64
    signal_fraction: float = 0.05
    signal_shift: float = 2.0
    noise_std: float = 1.0
    positive_rate: float = 0.77
    seed: int = 0

    def __post_init__(self):
        if self.n_bags < 1 or self.K < 1 or self.M < 1:
            raise ValueError("n_bags, K and M must be positive")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must lie in (0, 1]")
        if self.signal_shift < 0:
            raise ValueError("signal_shift must be non-negative")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if not 0 < self.positive_rate < 1:
            raise ValueError("positive_rate must lie in (0, 1)")

    @property
    def signal_count(self) -> int:
        return max(1, int(math.floor(self.K * self.signal_fraction + 0.5)))


def grid_coords(k: int):
    """Row-major coordinates on a grid ceil(sqrt(k)) columns wide."""
    cols = int(math.ceil(math.sqrt(k)))
    return np.array([(i // cols, i % cols) for i in range(k)], dtype=np.int64)


def signal_direction(spec: SynthSpec):
    """The fixed random direction along which signal instances are shifted.

    A standard normal draw, not rescaled to unit length, so the expected
    squared norm is M.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    return rng.standard_normal(spec.M)


def generate_bags(spec: SynthSpec):
    """Return (bags, masks); ``masks[i]`` flags the signal instances of bag i.

    Features are rounded to float32 so bags survive a bag-file round trip unchanged.
    """
    direction = signal_direction(spec)
    children = np.random.SeedSequence([spec.seed, 1]).spawn(spec.n_bags)
    coords = grid_coords(spec.K)
    width = len(str(spec.n_bags - 1))
    bags, masks = [], []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        label = int(rng.random() < spec.positive_rate)
        feats = rng.normal(0.0, spec.noise_std, size=(spec.K, spec.M))
        mask = np.zeros(spec.K, dtype=bool)
        if label:
            idx = rng.choice(spec.K, size=spec.signal_count, replace=False)
            mask[idx] = True
            feats[idx] += spec.signal_shift * direction
        feats = feats.astype(np.float32).astype(np.float64)
        bags.append(Bag(f"synth{i:0{width}d}", feats, coords.copy(), label))
        masks.append(mask)
    return bags, masks


def generate_slide(width: int, height: int, lesion_rects=(), seed: int = 0,
                   slide_id: str = "slide", channels: int = 3) -> SlideImage:
    """Bright textured background (mean ~230) with darker rectangles (mean ~120).

    ``lesion_rects`` holds (x, y, w, h) pixel rectangles; label is 1 iff any are given.
    """
    if width < 1 or height < 1:
        raise ValueError("slide dimensions must be positive")
    rects = [tuple(int(v) for v in r) for r in lesion_rects]
    for x, y, w, h in rects:
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"lesion rectangle {(x, y, w, h)} outside {width}x{height} slide")
    rng = np.random.default_rng(seed)
    shape = (height, width, channels) if channels > 1 else (height, width)
    pixels = rng.normal(230.0, 6.0, size=shape)
    for x, y, w, h in rects:
        sub = pixels[y:y + h, x:x + w]
        pixels[y:y + h, x:x + w] = rng.normal(120.0, 20.0, size=sub.shape)
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return SlideImage(slide_id, pixels, int(bool(rects)))


def render_bag(bag: Bag, cell: int | None = None, scale: float = 32.0):
    """Lay each instance's features out as a cell x cell pixel block on the bag grid.

    Used as the surrogate high-resolution image for the downscaled baseline
    when only feature bags exist. Empty grid cells are white.
    """
    m = bag.M
    cell = cell or int(math.ceil(math.sqrt(m)))
    rows = int(bag.coords[:, 0].max()) + 1
    cols = int(bag.coords[:, 1].max()) + 1
    img = np.full((rows * cell, cols * cell), 255.0)
    block = np.full((len(bag.instances), cell * cell), 128.0)
    block[:, :m] = np.clip(128.0 + scale * bag.instances, 0.0, 255.0)
    for (r, c), vals in zip(bag.coords, block):
        img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = vals.reshape(cell, cell)
    return img
