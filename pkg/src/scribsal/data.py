"""Dataset layout, loading, preprocessing and a synthetic multimodal generator.

On-disk layout is one flat directory per raster kind::

    root/
      manifest.json
      rgb/<id>.png       8-bit RGB
      depth/<id>.png     8-bit grayscale
      thermal/<id>.png   8-bit grayscale
      scribble/<id>.png  8-bit grayscale, values exactly {0, 1, 2}
      gt/<id>.png        8-bit grayscale, values {0, 255}

Scribble encoding: 1 = foreground stroke, 2 = background stroke, 0 = unlabeled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import (
    AlignmentError,
    ConfigError,
    EncodingError,
    IoError,
    MissingModality,
    PreconditionError,
)

MODALITY_DIRS = {"v": "rgb", "d": "depth", "t": "thermal"}
VALID_MODALITY_SETS = (
    frozenset("v"),
    frozenset("vd"),
    frozenset("vt"),
    frozenset("vdt"),
)
VALID_SIDES = (64, 128, 256, 512, 1024)

# Per-channel normalization applied after resizing; 0.5/0.5 maps [0,1] to [-1,1].
DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.5


@dataclass
class ScribbleMap:
    """Tri-valued integer raster; 0 unlabeled, 1 foreground, 2 background."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        bad = np.setdiff1d(np.unique(self.values), [0, 1, 2])
        if bad.size:
            raise EncodingError(f"scribble contains invalid values {bad.tolist()}")
        self.values = self.values.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def labeled_count(self) -> int:
        return int((self.values != 0).sum())


@dataclass
class Sample:
    """Aligned multimodal rasters plus scribble and optional dense ground truth.

    ``modalities`` maps tag in {v, d, t} to an H x W x 3 float32 raster.
    Intensities are in [0, 1] at load time; after :func:`preprocess` they are
    mean/std normalized.
    """

    id: str
    modalities: dict[str, np.ndarray]
    scribble: ScribbleMap | None = None
    gt: np.ndarray | None = None

    def __post_init__(self):
        tags = frozenset(self.modalities)
        if tags not in VALID_MODALITY_SETS:
            raise ConfigError(f"modality set {sorted(tags)} is not one of v/vd/vt/vdt")
        shapes = {m: a.shape[:2] for m, a in self.modalities.items()}
        if len(set(shapes.values())) != 1:
            raise AlignmentError(f"modality shapes disagree: {shapes}")
        hw = next(iter(shapes.values()))
        if self.scribble is not None and self.scribble.shape != hw:
            raise AlignmentError(
                f"scribble shape {self.scribble.shape} != image shape {hw}"
            )
        if self.gt is not None and self.gt.shape[:2] != hw:
            raise AlignmentError(f"gt shape {self.gt.shape} != image shape {hw}")

    @property
    def side(self) -> tuple[int, int]:
        return next(iter(self.modalities.values())).shape[:2]


@dataclass
class DatasetManifest:
    """Index of a dataset split on disk."""

    root: Path
    split: str
    modality_tags: tuple[str, ...]
    sample_ids: list[str] = field(default_factory=list)

    @property
    def counts(self) -> int:
        return len(self.sample_ids)

    def path_for(self, tag: str, sample_id: str) -> Path:
        return Path(self.root) / MODALITY_DIRS[tag] / f"{sample_id}.png"

    def scribble_path(self, sample_id: str) -> Path:
        return Path(self.root) / "scribble" / f"{sample_id}.png"

    def gt_path(self, sample_id: str) -> Path:
        return Path(self.root) / "gt" / f"{sample_id}.png"

    def save(self) -> Path:
        out = Path(self.root) / "manifest.json"
        payload = {
            "root": str(self.root),
            "split": self.split,
            "modalities": list(self.modality_tags),
            "ids": list(self.sample_ids),
        }
        try:
            out.write_text(json.dumps(payload, indent=2))
        except OSError as e:
            raise IoError(f"cannot write manifest: {e}") from e
        return out

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        try:
            payload = json.loads(path.read_text())
        except OSError as e:
            raise IoError(f"cannot read manifest at {path}: {e}") from e
        return cls(
            root=path.parent,
            split=payload["split"],
            modality_tags=tuple(payload["modalities"]),
            sample_ids=list(payload["ids"]),
        )


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingModality(f"missing file {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """Load one sample: images scaled to [0,1], depth/thermal replicated to 3ch."""
    if sample_id not in manifest.sample_ids:
        raise PreconditionError(f"id {sample_id!r} not in manifest")

    modalities = {}
    for tag in manifest.modality_tags:
        raw = _read_png(manifest.path_for(tag, sample_id))
        if raw.ndim == 2:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        elif raw.shape[2] == 4:
            raw = raw[:, :, :3]
        modalities[tag] = raw.astype(np.float32) / 255.0

    shapes = {m: a.shape[:2] for m, a in modalities.items()}
    if len(set(shapes.values())) != 1:
        raise AlignmentError(f"modality shapes disagree for {sample_id}: {shapes}")

    scribble = None
    spath = manifest.scribble_path(sample_id)
    if spath.exists():
        scribble = ScribbleMap(_read_png(spath))
    elif manifest.split == "train":
        raise MissingModality(f"train sample {sample_id} has no scribble file")

    gt = None
    gpath = manifest.gt_path(sample_id)
    if gpath.exists():
        gt = (_read_png(gpath) > 127).astype(np.float32)

    return Sample(id=sample_id, modalities=modalities, scribble=scribble, gt=gt)


def _resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None].float()
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_nearest(raster: np.ndarray, side: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(raster))[None, None].float()
    out = F.interpolate(t, size=(side, side), mode="nearest-exact")
    return out[0, 0].numpy().astype(raster.dtype)


def preprocess(
    sample: Sample,
    side: int,
    patch: int = 16,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
) -> Sample:
    """Resize to side x side and normalize images; labels resized nearest-neighbor."""
    if side % patch != 0:
        raise ConfigError(f"side {side} not divisible by patch size {patch}")
    if side not in VALID_SIDES:
        raise ConfigError(f"side {side} not in {VALID_SIDES}")
    for m, a in sample.modalities.items():
        if not np.isfinite(a).all():
            raise PreconditionError(f"modality {m!r} contains non-finite pixels")

    modalities = {
        m: (_resize_bilinear(a, side) - mean) / std for m, a in sample.modalities.items()
    }
    scribble = None
    if sample.scribble is not None:
        scribble = ScribbleMap(_resize_nearest(sample.scribble.values, side))
    gt = None
    if sample.gt is not None:
        gt = _resize_nearest(sample.gt, side)
    return replace(sample, modalities=modalities, scribble=scribble, gt=gt)


def denormalize_rgb(
    raster: np.ndarray | torch.Tensor,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
):
    """Invert the preprocess normalization back to [0,1] (for loss kernels)."""
    out = raster * std + mean
    return out.clip(0.0, 1.0) if isinstance(out, np.ndarray) else out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


def _textured_background(rng: np.random.Generator, side: int) -> np.ndarray:
    """Low-frequency color texture in [0,1], H x W x 3."""
    coarse = rng.uniform(0.1, 0.6, size=(side // 8, side // 8, 3)).astype(np.float32)
    bg = _resize_bilinear(coarse, side)
    bg += rng.normal(0.0, 0.02, size=bg.shape).astype(np.float32)
    return bg.clip(0.0, 1.0)


def _shape_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    """One random filled circle, ellipse, or rectangle. Boolean H x W."""
    yy, xx = np.mgrid[0:side, 0:side]
    kind = rng.integers(0, 3)
    cy, cx = rng.uniform(0.25 * side, 0.75 * side, size=2)
    if kind == 0:  # circle
        r = rng.uniform(side / 8, side / 4)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == 1:  # axis-aligned ellipse
        ry = rng.uniform(side / 8, side / 4)
        rx = rng.uniform(side / 8, side / 4)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    hy = rng.uniform(side / 8, side / 4)
    hx = rng.uniform(side / 8, side / 4)
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def _random_walk_stroke(
    rng: np.random.Generator, region: np.ndarray, n_steps: int
) -> np.ndarray:
    """Dilated random-walk path constrained to ``region``; empty if region is."""
    stroke = np.zeros_like(region, dtype=bool)
    ys, xs = np.nonzero(region)
    if ys.size == 0:
        return stroke
    i = rng.integers(0, ys.size)
    y, x = int(ys[i]), int(xs[i])
    stroke[y, x] = True
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n_steps):
        for _attempt in range(8):
            dy = int(np.rint(np.sin(angle)))
            dx = int(np.rint(np.cos(angle)))
            ny, nx = y + dy, x + dx
            if 0 <= ny < region.shape[0] and 0 <= nx < region.shape[1] and region[ny, nx]:
                y, x = ny, nx
                stroke[y, x] = True
                angle += rng.normal(0.0, 0.4)
                break
            angle = rng.uniform(0, 2 * np.pi)
    # widen to >=2 px so nearest-neighbor downscaling keeps the stroke alive
    return ndimage.binary_dilation(stroke, iterations=1)


def _save_u8(path: Path, array: np.ndarray, mode: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(array.astype(np.uint8), mode=mode).save(path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _generate_one(rng: np.random.Generator, side: int) -> dict[str, np.ndarray]:
    rgb = _textured_background(rng, side)
    gt = np.zeros((side, side), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        mask = _shape_mask(rng, side)
        color = rng.uniform(0.4, 1.0, size=3).astype(np.float32)
        rgb[mask] = color + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3)).astype(
            np.float32
        )
        gt |= mask
    rgb = rgb.clip(0.0, 1.0)

    dist = ndimage.distance_transform_edt(~gt)
    depth = dist / max(dist.max(), 1.0)

    thermal = ndimage.gaussian_filter(gt.astype(np.float32), sigma=side / 32.0)
    thermal = thermal / max(thermal.max(), 1e-6)
    thermal = (thermal + rng.normal(0.0, 0.05, size=thermal.shape)).clip(0.0, 1.0)

    interior = ndimage.binary_erosion(gt, iterations=2)
    fg_stroke = _random_walk_stroke(rng, interior, n_steps=2 * side)
    fg_stroke &= ndimage.binary_erosion(gt, iterations=1)

    far_bg = ndimage.distance_transform_edt(~gt) > 3
    bg_stroke = _random_walk_stroke(rng, far_bg, n_steps=2 * side)
    bg_stroke &= ~gt

    scribble = np.zeros((side, side), dtype=np.uint8)
    scribble[fg_stroke] = 1
    scribble[bg_stroke] = 2

    return {
        "rgb": np.rint(rgb * 255),
        "depth": np.rint(depth * 255),
        "thermal": np.rint(thermal * 255),
        "gt": gt.astype(np.uint8) * 255,
        "scribble": scribble,
    }


def synth_dataset(
    root: str | Path,
    n: int,
    side: int,
    modality_tags: set[str] | str,
    seed: int,
    split: str = "train",
) -> DatasetManifest:
    """Write ``n`` synthetic samples under ``root``; deterministic in all inputs.

    Every foreground-stroke pixel lies inside the ground-truth union and every
    background-stroke pixel outside it.
    """
    if n < 1:
        raise PreconditionError(f"need n >= 1, got {n}")
    tags = frozenset(modality_tags)
    if tags not in VALID_MODALITY_SETS:
        raise ConfigError(f"modality set {sorted(tags)} is not one of v/vd/vt/vdt")
    root = Path(root)

    ordered = tuple(t for t in "vdt" if t in tags)
    manifest = DatasetManifest(root=root, split=split, modality_tags=ordered)
    for i, seq in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(seq)
        rasters = _generate_one(rng, side)
        while not ((rasters["scribble"] == 1).any() and (rasters["scribble"] == 2).any()):
            rasters = _generate_one(rng, side)  # degenerate geometry; redraw
        sid = f"{i:04d}"
        for tag in ordered:
            kind = MODALITY_DIRS[tag]
            mode = "RGB" if tag == "v" else "L"
            _save_u8(root / kind / f"{sid}.png", rasters[kind], mode)
        _save_u8(root / "scribble" / f"{sid}.png", rasters["scribble"], "L")
        _save_u8(root / "gt" / f"{sid}.png", rasters["gt"], "L")
        manifest.sample_ids.append(sid)

    manifest.save()
    return manifest
