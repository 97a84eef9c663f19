"""Attention heatmaps: per-region rasters, slide stitching, and PNG output.

The zero level is reserved: a painted value of exactly 0.0 means "no
attention possible here" (masked patch or uncovered canvas), never "low
attention". Masked-variant rasters therefore map tissue patches onto
[1/255, 1] after min-max normalization, one quantization level above the
reserve, so the zero set coincides exactly with the zero-tissue set.
Plain-variant rasters normalize against the same tissue-patch window but
clip background into [0, 1] with no floor and no forced zeros.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pipeline import GeometryError
from .tensor import Tensor

ZERO_FLOOR = 1.0 / 255.0  # smallest paintable attention in masked rasters


class ColormapError(ValueError):
    """Unknown colormap name or un-invertible pixel."""


@dataclass
class HeatmapRaster:
    """Pixel raster of attention values in [0, 1] plus rendering provenance."""

    values: np.ndarray  # (height, width) float64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise GeometryError(f"heatmap must be 2-d, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _as_array(weights) -> np.ndarray:
    if isinstance(weights, Tensor):
        return weights.data
    return np.asarray(weights, dtype=np.float64)


def region_heatmap(
    weights,
    tissue: np.ndarray,
    region_size: int,
    patch_size: int,
    reduction: str = "mean",
    mask_background: bool = True,
) -> HeatmapRaster:
    """Render one region's class-token attention onto its pixel grid.

    weights: (heads, seq, seq) post-softmax attention of one block for one
    region, class token at index 0. The class-token query row (its
    attention over the patches) is reduced across heads, min-max
    normalized over tissue patches, and painted as constant blocks of
    patch_size pixels. With `mask_background` every zero-tissue patch is
    painted exactly 0.0; without it the same normalization window applies
    but background keeps its (clipped) value. A constant tissue row
    normalizes to 1.0.
    """
    w = _as_array(weights)
    tissue = np.asarray(tissue, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise GeometryError(f"weights must be (heads, seq, seq), got {w.shape}")
    if patch_size < 1 or region_size % patch_size != 0:
        raise GeometryError(f"patch_size {patch_size} must divide region_size {region_size}")
    grid = region_size // patch_size
    tokens = grid * grid
    if w.shape[1] != tokens + 1:
        raise GeometryError(
            f"weights cover {w.shape[1]} tokens, geometry implies {tokens} patches + class token"
        )
    if tissue.shape != (tokens,):
        raise GeometryError(f"tissue must be ({tokens},), got {tissue.shape}")

    class_row = w[:, 0, 1:]  # attention of the class token over the patches
    if reduction == "mean":
        scores = class_row.mean(axis=0)
    elif reduction == "max":
        scores = class_row.max(axis=0)
    else:
        raise ValueError(f"unknown reduction {reduction!r} (use 'mean' or 'max')")

    on_tissue = tissue > 0.0
    if not on_tissue.any():
        raise GeometryError("region has no tissue patch to normalize against")
    lo = scores[on_tissue].min()
    hi = scores[on_tissue].max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        norm = np.ones_like(scores)  # constant tissue attention paints 1.0

    if mask_background:
        paint = np.zeros_like(scores)
        paint[on_tissue] = ZERO_FLOOR + (1.0 - ZERO_FLOOR) * norm[on_tissue]
    else:
        paint = np.clip(norm, 0.0, 1.0)

    blocks = paint.reshape(grid, grid)
    values = np.repeat(np.repeat(blocks, patch_size, axis=0), patch_size, axis=1)
    return HeatmapRaster(
        values=values,
        provenance={
            "reduction": reduction,
            "mask_background": bool(mask_background),
            "normalization": "minmax-over-tissue",
            "region_size": region_size,
            "patch_size": patch_size,
        },
    )


def stitch_heatmaps(
    rasters: "list[HeatmapRaster | np.ndarray]",
    coords: np.ndarray,
    slide_size: tuple[int, int],
    downsample: int = 1,
) -> HeatmapRaster:
    """Place region rasters on the slide canvas and average-pool by `downsample`.

    Uncovered canvas stays exactly 0.0. Regions must not overlap, their
    top-left corners must lie inside the slide, and the downsample factor
    must divide the region size (and the coordinates), which keeps this
    exactly equal to painting at full resolution and then pooling.
    Output dimensions are ceil(slide / downsample) on each axis.
    """
    if not rasters:
        raise GeometryError("nothing to stitch")
    arrays = [r.values if isinstance(r, HeatmapRaster) else np.asarray(r, float) for r in rasters]
    sizes = {a.shape for a in arrays}
    if len(sizes) != 1 or any(a.shape[0] != a.shape[1] for a in arrays):
        raise GeometryError(f"regions must share one square size, got {sorted(sizes)}")
    region = arrays[0].shape[0]
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape != (len(arrays), 2):
        raise GeometryError(f"coords must be ({len(arrays)}, 2), got {coords.shape}")
    width, height = int(slide_size[0]), int(slide_size[1])
    if width < 1 or height < 1:
        raise GeometryError(f"bad slide size {slide_size}")
    s = int(downsample)
    if s < 1:
        raise GeometryError("downsample must be >= 1")
    if region % s != 0:
        raise GeometryError(f"downsample {s} must divide region size {region}")

    out_w = math.ceil(width / s)
    out_h = math.ceil(height / s)
    canvas = np.zeros((out_h * s, out_w * s), dtype=np.float64)
    coverage = np.zeros_like(canvas, dtype=np.int32)
    for arr, (x, y) in zip(arrays, coords):
        x, y = int(x), int(y)
        if x < 0 or y < 0 or x >= width or y >= height:
            raise GeometryError(f"region corner ({x}, {y}) outside slide {width}x{height}")
        if x % s != 0 or y % s != 0:
            raise GeometryError(f"region corner ({x}, {y}) not aligned to downsample {s}")
        ch = min(region, canvas.shape[0] - y)
        cw = min(region, canvas.shape[1] - x)
        canvas[y : y + ch, x : x + cw] = arr[:ch, :cw]
        coverage[y : y + ch, x : x + cw] += 1
    if (coverage > 1).any():
        raise GeometryError("regions overlap on the canvas")

    if s == 1:
        pooled = canvas
    else:
        # sum-then-divide on a contiguous block is bitwise what np.mean does,
        # which keeps this exactly equal to an independent paint-then-pool
        area = s * s
        pooled = np.empty((out_h, out_w), dtype=np.float64)
        for by in range(out_h):
            for bx in range(out_w):
                block = np.ascontiguousarray(canvas[by * s : (by + 1) * s, bx * s : (bx + 1) * s])
                pooled[by, bx] = block.sum() / area
    return HeatmapRaster(
        values=pooled,
        provenance={"downsample": s, "regions": len(arrays), "slide_size": [width, height]},
    )


# -- colormaps -----------------------------------------------------------------


def _build_heat() -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[0] = (0, 0, 0)  # reserved: no attention possible
    for level in range(1, 256):
        t = (level - 1) / 254.0
        lut[level, 0] = level  # strictly increasing -> distinct and rank-true
        lut[level, 1] = int(round(255.0 * t * t))
        lut[level, 2] = int(round(96.0 * (1.0 - t)))
    return lut


def _build_gray() -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[0] = (32, 0, 32)  # reserved; off the gray diagonal
    for level in range(1, 256):
        lut[level] = (level, level, level)
    return lut


_LUTS: dict[str, np.ndarray] = {"heat": _build_heat(), "gray": _build_gray()}


def colormap_lut(name: str) -> np.ndarray:
    """256 x 3 uint8 lookup table; all rows distinct, level 0 reserved."""
    try:
        return _LUTS[name]
    except KeyError:
        raise ColormapError(f"unknown colormap {name!r}; have {sorted(_LUTS)}") from None


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 levels (round to nearest)."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(raster: HeatmapRaster, path: str | Path, colormap: str = "heat") -> None:
    """PNG of the colormapped raster plus a JSON sidecar with its provenance."""
    lut = colormap_lut(colormap)
    levels = quantize(raster.values)
    rgb = lut[levels]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    sidecar = {
        "colormap": colormap,
        "width": raster.width,
        "height": raster.height,
        "provenance": raster.provenance,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n"
    )


def read_image(path: str | Path) -> tuple[np.ndarray, dict]:
    """Invert write_image: recover quantized values (levels / 255) and the sidecar."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise ColormapError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    lut = colormap_lut(sidecar["colormap"])
    rgb = np.asarray(Image.open(path).convert("RGB"))
    inverse = {tuple(int(c) for c in lut[level]): level for level in range(256)}
    flat = rgb.reshape(-1, 3)
    levels = np.empty(flat.shape[0], dtype=np.uint8)
    for i, px in enumerate(map(tuple, flat)):
        try:
            levels[i] = inverse[px]
        except KeyError:
            raise ColormapError(f"pixel {px} is not in colormap {sidecar['colormap']!r}") from None
    values = levels.reshape(rgb.shape[:2]).astype(np.float64) / 255.0
    return values, sidecar
