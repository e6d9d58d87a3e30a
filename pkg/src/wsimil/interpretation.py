"""Attention heatmaps over the patch grid and Integrated Gradients for the baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wsimil.pooling import Bag


@dataclass
class AttributionMap:
    slide_id: str
    mode: str  # "attention" or "integrated_gradients"
    values: np.ndarray  # (rows, cols) grid or (H, W[, C]) pixel field
    note: str = ""

    def to_dict(self) -> dict:
        vals = np.asarray(self.values, dtype=np.float64)
        return {
            "slide_id": self.slide_id,
            "mode": self.mode,
            "rows": int(vals.shape[0]),
            "cols": int(vals.shape[1]),
            "shape": list(vals.shape),
            "values": vals.reshape(-1).tolist(),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d) -> "AttributionMap":
        vals = np.asarray(d["values"], dtype=np.float64).reshape(d.get("shape", [d["rows"], d["cols"]]))
        return cls(d["slide_id"], d["mode"], vals, d.get("note", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    def to_grayscale(self):
        """Per-map min-max scaling to 8 bits; returns (uint8 image, (lo, hi))."""
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 3:
            vals = vals.sum(axis=2)
        lo, hi = float(vals.min()), float(vals.max())
        if hi > lo:
            img = np.rint(255.0 * (vals - lo) / (hi - lo))
        else:
            img = np.zeros_like(vals)
        return img.astype(np.uint8), (lo, hi)

    def save_image(self, path):
        from wsimil.tiling import save_raster

        img, (lo, hi) = self.to_grayscale()
        save_raster(path, img)
        return f"min-max scaled: {lo:.6g} -> 0, {hi:.6g} -> 255"


def attention_heatmap(bag: Bag, a, grid_shape=None) -> AttributionMap:
    """Place each instance's weight at its grid cell; cells without an instance hold 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (bag.K,):
        raise ValueError(f"{a.size} weights for a bag of {bag.K} instances")
    needed = (int(bag.coords[:, 0].max()) + 1, int(bag.coords[:, 1].max()) + 1)
    if grid_shape is None:
        grid_shape = needed
    grid_shape = tuple(int(s) for s in grid_shape)
    if needed[0] > grid_shape[0] or needed[1] > grid_shape[1]:
        raise ValueError(f"bag coordinates reach {needed}, outside grid {grid_shape}")
    grid = np.zeros(grid_shape)
    grid[bag.coords[:, 0], bag.coords[:, 1]] = a
    return AttributionMap(bag.slide_id, "attention", grid,
                          "attention weights; background cells are 0")


def integrated_gradients(value_and_grad, x, x_ref, steps: int = 256, batch: int = 64):
    """Riemann-midpoint Integrated Gradients along the straight path from x_ref to x.

    ``value_and_grad`` maps a batch of inputs (N, *x.shape) to (values (N,),
    gradients (N, *x.shape)).
    """
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError(f"input {x.shape} and reference {x_ref.shape} differ in shape")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    delta = x - x_ref
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for start in range(0, steps, batch):
        al = alphas[start:start + batch]
        pts = x_ref[None] + al.reshape((-1,) + (1,) * x.ndim) * delta[None]
        _, grads = value_and_grad(pts)
        grads = np.asarray(grads, dtype=np.float64)
        if not np.all(np.isfinite(grads)):
            raise FloatingPointError("non-finite gradient along the integration path")
        total += grads.sum(axis=0)
    return delta * total / steps


def reference_image(shape, kind: str = "white"):
    if kind not in ("white", "black"):
        raise ValueError("reference must be 'white' or 'black'")
    return np.full(shape, 255.0 if kind == "white" else 0.0)


def explain_baseline(model, params, image_chw, slide_id: str, steps: int = 256,
                     reference: str = "white") -> AttributionMap:
    """IG map for a baseline CNN on one (C, S, S) pixel image; values are (S, S, C)."""
    x = np.asarray(image_chw, dtype=np.float64)
    ref = reference_image(x.shape, reference)
    attr = integrated_gradients(lambda b: model.input_gradient(params, b), x, ref, steps)
    p_x = float(model.forward(params, x[None])[0])
    p_ref = float(model.forward(params, ref[None])[0])
    note = (f"integrated gradients, {steps} midpoint steps, {reference} reference; "
            f"F(x)={p_x:.6g} F(ref)={p_ref:.6g} sum={attr.sum():.6g}")
    return AttributionMap(slide_id, "integrated_gradients", attr.transpose(1, 2, 0), note)


def localization_score(a, mask) -> float:
    """Attention mass on true signal instances divided by their uniform share."""
    a = np.asarray(a, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("bag has no signal instances")
    return float(a[mask].sum() / (mask.sum() / mask.size))
