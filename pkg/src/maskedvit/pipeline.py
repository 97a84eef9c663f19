"""Tissue masks, region tiling, synthetic slides, and fold splitting.

Tiling rules: the region grid is anchored at pixel (0, 0) with stride
equal to the region size; regions that hang over the raster edge are
padded with background. A region is retained iff its tissue fraction
(tissue pixels / region area, padding counted as background) is at least
`min_tissue`. The fraction is computed as an integer count divided by
the region area, so threshold comparisons are exact at the boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import serialize
from .model import SlideSample

MIN_TISSUE_DEFAULT = 0.10
FEATURE_DIM = 10  # 8 intensity-histogram bins + mean + std
SLIDE_VERSION = 1


class MaskFormatError(ValueError):
    """A tissue mask raster is malformed."""


class GeometryError(ValueError):
    """Region/patch geometry is inconsistent."""


class FoldError(ValueError):
    """Fold splitting is impossible with the given arguments."""


class SynthesisError(RuntimeError):
    """Synthetic slide generation failed to satisfy its own guarantees."""


@dataclass
class TissueMaskRaster:
    """Binary tissue map: nonzero bitmap entries are tissue pixels."""

    bitmap: np.ndarray  # (height, width) uint8
    spacing: float  # micrometers per pixel

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap)
        if self.bitmap.ndim != 2 or self.bitmap.dtype != np.uint8:
            raise MaskFormatError(
                f"bitmap must be 2-d uint8, got {self.bitmap.dtype} {self.bitmap.shape}"
            )
        if self.bitmap.shape[0] < 1 or self.bitmap.shape[1] < 1:
            raise MaskFormatError("mask must have positive extent")
        if not (self.spacing > 0.0):
            raise MaskFormatError(f"spacing must be positive, got {self.spacing}")

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]


@dataclass(frozen=True)
class RegionSpec:
    """One retained region: top-left pixel offset, size, and tissue fraction."""

    x: int
    y: int
    size: int
    tissue_fraction: float


def extract_regions(
    mask: TissueMaskRaster, region_size: int, min_tissue: float = MIN_TISSUE_DEFAULT
) -> list[RegionSpec]:
    """Tile the mask into regions and keep those meeting the tissue threshold.

    Regions are listed row-major (left to right, then top to bottom).
    The threshold test is `count / region_size**2 >= min_tissue`, done in
    that order so e.g. 10% of the area compares equal, not below.
    """
    if region_size < 1:
        raise GeometryError("region_size must be positive")
    if not (0.0 <= min_tissue <= 1.0):
        raise GeometryError(f"min_tissue must lie in [0, 1], got {min_tissue}")
    binary = mask.bitmap != 0
    area = region_size * region_size
    regions: list[RegionSpec] = []
    for y in range(0, mask.height, region_size):
        for x in range(0, mask.width, region_size):
            count = int(binary[y : y + region_size, x : x + region_size].sum())
            fraction = count / area
            if fraction >= min_tissue:
                regions.append(RegionSpec(x=x, y=y, size=region_size, tissue_fraction=fraction))
    return regions


def patch_tissue_fractions(
    mask: TissueMaskRaster, region: RegionSpec, patch_size: int
) -> np.ndarray:
    """Per-patch tissue fractions for one region, row-major, shape (tokens,).

    Patches overhanging the raster count the missing pixels as background.
    """
    if patch_size < 1 or region.size % patch_size != 0:
        raise GeometryError(
            f"patch_size {patch_size} must divide region size {region.size}"
        )
    grid = region.size // patch_size
    binary = mask.bitmap != 0
    area = patch_size * patch_size
    fractions = np.empty(grid * grid, dtype=np.float64)
    i = 0
    for gy in range(grid):
        for gx in range(grid):
            y = region.y + gy * patch_size
            x = region.x + gx * patch_size
            count = int(binary[y : y + patch_size, x : x + patch_size].sum())
            fractions[i] = count / area
            i += 1
    return fractions


def _padded_block(raster: np.ndarray, x: int, y: int, size: int) -> np.ndarray:
    """Crop a (size, size) block at (x, y), zero-padding past the raster edge."""
    block = np.zeros((size, size), dtype=raster.dtype)
    view = raster[y : y + size, x : x + size]
    block[: view.shape[0], : view.shape[1]] = view
    return block


def patch_features(canvas: np.ndarray, region: RegionSpec, patch_size: int) -> np.ndarray:
    """Per-patch descriptors from the pixel content: shape (tokens, FEATURE_DIM).

    Each patch yields an 8-bin intensity histogram (fractions of the
    patch) plus mean and standard deviation, all scaled to [0, 1]. A toy
    stand-in for a pretrained patch encoder; deterministic and cheap.
    """
    if canvas.dtype != np.uint8 or canvas.ndim != 2:
        raise MaskFormatError(f"canvas must be 2-d uint8, got {canvas.dtype} {canvas.shape}")
    grid = region.size // patch_size
    block = _padded_block(canvas, region.x, region.y, region.size)
    feats = np.empty((grid * grid, FEATURE_DIM), dtype=np.float64)
    area = patch_size * patch_size
    i = 0
    for gy in range(grid):
        for gx in range(grid):
            patch = block[
                gy * patch_size : (gy + 1) * patch_size,
                gx * patch_size : (gx + 1) * patch_size,
            ]
            hist = np.bincount(patch.reshape(-1) >> 5, minlength=8) / area
            feats[i, :8] = hist
            feats[i, 8] = patch.mean() / 255.0
            feats[i, 9] = patch.std() / 255.0
            i += 1
    return feats


def preprocess_slide(
    mask: TissueMaskRaster,
    canvas: np.ndarray,
    slide_id: str,
    label: int,
    region_size: int,
    patch_size: int,
    min_tissue: float = MIN_TISSUE_DEFAULT,
) -> SlideSample | None:
    """Tile one slide into a SlideSample; None if no region is retained."""
    if canvas.shape != mask.bitmap.shape:
        raise GeometryError(
            f"canvas {canvas.shape} and mask {mask.bitmap.shape} extents differ"
        )
    regions = extract_regions(mask, region_size, min_tissue)
    if not regions:
        return None
    coords = np.array([[r.x, r.y] for r in regions], dtype=np.int64)
    tissue = np.stack([patch_tissue_fractions(mask, r, patch_size) for r in regions])
    feats = np.stack([patch_features(canvas, r, patch_size) for r in regions])
    return SlideSample(
        slide_id=slide_id,
        label=int(label),
        region_coords=coords,
        features=feats,
        tissue=tissue,
        slide_size=(mask.width, mask.height),
        region_size=region_size,
        patch_size=patch_size,
    )


# -- labels ------------------------------------------------------------------


def tissue_mean_label(canvas: np.ndarray, bitmap: np.ndarray, num_classes: int = 6) -> int:
    """Grade = floor(mean tissue intensity * num_classes), clamped to the top class."""
    values = canvas[bitmap != 0]
    if values.size == 0:
        raise MaskFormatError("cannot label a slide with no tissue pixels")
    mean = float(values.mean()) / 255.0
    return min(num_classes - 1, int(mean * num_classes))


# -- synthetic slides ----------------------------------------------------------


@dataclass
class SyntheticSlideSpec:
    """Knobs for the synthetic-slide generator.

    Tissue is drawn as grid-snapped rectangles plus a few free ellipses;
    tissue intensity encodes the grade (see `tissue_mean_label`), while
    background gets a label-anticorrelated distractor intensity, so an
    unmasked model can cheat off it but a masked model cannot see it.
    """

    width: int = 2048
    height: int = 2048
    region_size: int = 1024
    patch_size: int = 256
    min_tissue: float = MIN_TISSUE_DEFAULT
    num_classes: int = 6
    primary_blobs: tuple[int, int] = (1, 3)  # count range, inclusive
    primary_patches: tuple[int, int] = (2, 5)  # rect side length, in patches
    noise_blobs: tuple[int, int] = (0, 3)  # small ellipses, count range
    noise_radius: tuple[int, int] = (40, 160)  # ellipse radii, pixels
    noise: float = 0.05  # intensity stddev
    spacing: float = 0.5  # micrometers per pixel
    seed: int = 0

    def validate(self) -> None:
        if self.width < self.patch_size or self.height < self.patch_size:
            raise GeometryError("canvas smaller than one patch")
        if self.region_size % self.patch_size != 0:
            raise GeometryError("patch_size must divide region_size")
        if not (0.0 <= self.min_tissue <= 1.0):
            raise GeometryError("min_tissue must lie in [0, 1]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        for lo, hi in (
            self.primary_blobs,
            self.primary_patches,
            self.noise_blobs,
            self.noise_radius,
        ):
            if lo > hi or lo < 0:
                raise ValueError(f"bad range ({lo}, {hi})")
        if self.primary_blobs[1] < 1:
            raise ValueError("need at least one primary blob allowed")


@dataclass
class SyntheticSlide:
    """Raw output of the generator for one slide, before tiling."""

    slide_id: str
    mask: TissueMaskRaster
    canvas: np.ndarray  # (height, width) uint8 intensities
    label: int


def _draw_mask(spec: SyntheticSlideSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, p = spec.height, spec.width, spec.patch_size
    mask = np.zeros((h, w), dtype=np.uint8)
    n_rects = int(rng.integers(max(1, spec.primary_blobs[0]), spec.primary_blobs[1] + 1))
    for _ in range(n_rects):
        pw = int(rng.integers(spec.primary_patches[0], spec.primary_patches[1] + 1)) * p
        ph = int(rng.integers(spec.primary_patches[0], spec.primary_patches[1] + 1)) * p
        pw, ph = min(pw, w), min(ph, h)
        x = int(rng.integers(0, (w - pw) // p + 1)) * p
        y = int(rng.integers(0, (h - ph) // p + 1)) * p
        mask[y : y + ph, x : x + pw] = 1
    n_ellipses = int(rng.integers(spec.noise_blobs[0], spec.noise_blobs[1] + 1))
    for _ in range(n_ellipses):
        rx = int(rng.integers(spec.noise_radius[0], spec.noise_radius[1] + 1))
        ry = int(rng.integers(spec.noise_radius[0], spec.noise_radius[1] + 1))
        cx = int(rng.integers(0, w))
        cy = int(rng.integers(0, h))
        x0, x1 = max(0, cx - rx), min(w, cx + rx + 1)
        y0, y1 = max(0, cy - ry), min(h, cy + ry + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        mask[y0:y1, x0:x1][inside] = 1
    return mask


def synthesize_slide(
    spec: SyntheticSlideSpec, slide_seed: np.random.SeedSequence, slide_id: str, grade_bin: int
) -> SyntheticSlide:
    """Generate one slide whose tiling retains at least one region.

    `grade_bin` picks the intensity band the tissue mean lands in; the
    stored label is still recomputed from the emitted pixels, so the
    label rule, not the target, is authoritative.
    """
    spec.validate()
    rng = np.random.default_rng(slide_seed)
    for _ in range(100):
        mask = _draw_mask(spec, rng)
        # target mean sits well inside its bin so quantization can't move the label
        target = (grade_bin + rng.uniform(0.2, 0.8)) / spec.num_classes
        # label-correlated background: anticorrelated mean plus per-slide jitter,
        # informative enough to attract unmasked attention without drowning tissue
        distractor = float(np.clip(0.62 - 0.3 * target + rng.normal(0.0, 0.05), 0.05, 0.95))
        tissue_sel = mask != 0
        n_tissue = int(tissue_sel.sum())
        if n_tissue == 0:
            continue
        canvas = np.empty((spec.height, spec.width), dtype=np.float64)
        canvas[~tissue_sel] = rng.normal(distractor, spec.noise, canvas.size - n_tissue)
        canvas[tissue_sel] = rng.normal(target, spec.noise, n_tissue)
        canvas_u8 = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
        raster = TissueMaskRaster(bitmap=mask, spacing=spec.spacing)
        if not extract_regions(raster, spec.region_size, spec.min_tissue):
            continue
        label = tissue_mean_label(canvas_u8, mask, spec.num_classes)
        return SyntheticSlide(slide_id=slide_id, mask=raster, canvas=canvas_u8, label=label)
    raise SynthesisError(
        "no retained region after 100 attempts; blob sizes are too small for the geometry"
    )


def synthesize_slides(
    spec: SyntheticSlideSpec, n_slides: int, seed: int | None = None
) -> list[SyntheticSlide]:
    """Generate `n_slides` raw slides with grades cycling through the classes."""
    if n_slides < 1:
        raise ValueError("n_slides must be >= 1")
    root = np.random.SeedSequence(spec.seed if seed is None else seed)
    children = root.spawn(n_slides)
    slides = []
    for i, child in enumerate(children):
        slide_id = f"slide{i:04d}"
        slides.append(synthesize_slide(spec, child, slide_id, i % spec.num_classes))
    return slides


def synthesize_dataset(
    spec: SyntheticSlideSpec, n_slides: int, seed: int | None = None
) -> list[SlideSample]:
    """Generate and tile a dataset in one go; every sample has >= 1 region."""
    samples = []
    for slide in synthesize_slides(spec, n_slides, seed):
        sample = preprocess_slide(
            slide.mask,
            slide.canvas,
            slide.slide_id,
            slide.label,
            spec.region_size,
            spec.patch_size,
            spec.min_tissue,
        )
        if sample is None:  # synthesize_slide guarantees otherwise
            raise SynthesisError(f"{slide.slide_id}: no region retained after synthesis")
        samples.append(sample)
    return samples


# -- fold splitting ------------------------------------------------------------


def stratified_folds(labels: "list[int] | np.ndarray", k: int = 5, seed: int = 0) -> list[list[int]]:
    """Split indices into k folds, balancing every class to within one sample.

    Each class's indices are shuffled and dealt round-robin, with the
    dealing offset rotating between classes so fold sizes stay level.
    Returns sorted index lists that partition range(len(labels)).
    """
    labels = [int(l) for l in labels]
    n = len(labels)
    if k < 2:
        raise FoldError("need at least two folds")
    if k > n:
        raise FoldError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in sorted(set(labels)):
        idx = np.array([i for i, lab in enumerate(labels) if lab == cls])
        idx = idx[rng.permutation(len(idx))]
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(int(i))
        offset = (offset + len(idx)) % k
    return [sorted(f) for f in folds]


# -- file formats ---------------------------------------------------------------


def save_mask(mask: TissueMaskRaster, path: str | Path) -> None:
    """Lossless PNG (0/255) plus a JSON sidecar holding the pixel spacing."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask.bitmap != 0, 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )
    sidecar = {"spacing": mask.spacing, "width": mask.width, "height": mask.height}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n"
    )


def load_mask(path: str | Path) -> TissueMaskRaster:
    path = Path(path)
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    bitmap = np.where(np.asarray(img) != 0, 1, 0).astype(np.uint8)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise MaskFormatError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    return TissueMaskRaster(bitmap=bitmap, spacing=float(sidecar["spacing"]))


def save_canvas(canvas: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="L").save(path, format="PNG")


def load_canvas(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8).copy()


def write_manifest(records: list[dict], path: str | Path) -> None:
    """One JSON object per line; keys sorted for byte-stable output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MaskFormatError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    return records


def save_sample(sample: SlideSample, path: str | Path) -> None:
    """Preprocessed slide as a deterministic binary container."""
    meta = {
        "kind": "slide",
        "version": SLIDE_VERSION,
        "slide_id": sample.slide_id,
        "label": sample.label,
        "width": sample.slide_size[0],
        "height": sample.slide_size[1],
        "region_size": sample.region_size,
        "patch_size": sample.patch_size,
    }
    serialize.write_container(
        path,
        meta,
        {
            "region_coords": sample.region_coords.astype(np.int64),
            "features": sample.features.astype(np.float64),
            "tissue": sample.tissue.astype(np.float64),
        },
    )


def load_sample(path: str | Path) -> SlideSample:
    meta, arrays = serialize.read_container(path)
    if meta.get("kind") != "slide":
        raise MaskFormatError(f"{path}: not a preprocessed slide")
    sample = SlideSample(
        slide_id=str(meta["slide_id"]),
        label=int(meta["label"]),
        region_coords=arrays["region_coords"],
        features=arrays["features"],
        tissue=arrays["tissue"],
        slide_size=(int(meta["width"]), int(meta["height"])),
        region_size=int(meta.get("region_size", 0)),
        patch_size=int(meta.get("patch_size", 0)),
    )
    sample.validate()
    return sample
