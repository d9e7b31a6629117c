"""Synthetic ground-object mosaics and the image/mask directory loader.

A mosaic is an axis-aligned grid of tiles, each filled with one class's
texture, optionally sprinkled with small elliptical objects of another class.
Generated pixels are quantized to 8-bit levels so that writing a dataset to
PNG and reading it back is bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

IMAGE_DIR = "images"
MASK_DIR = "masks"
_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ClassStyle:
    color: Tuple[float, float, float]
    noise: float
    # periodic texture: amplitude, spatial frequency (cycles/pixel), orientation (rad)
    stripe_amp: float = 0.0
    stripe_freq: float = 0.0
    stripe_angle: float = 0.0


def default_palette(num_classes: int, texture_seed: int = 0) -> Tuple[ClassStyle, ...]:
    """Distinct colours plus distinct stripe orientation/frequency per class.

    Texture differences survive colour jitter and grayscale, so classes stay
    separable for colour-invariant features.
    """
    rng = np.random.default_rng([texture_seed, 0x9A55])
    hues = (np.arange(num_classes) + rng.uniform(0, 0.5)) / num_classes
    angles = (rng.permutation(num_classes) + rng.uniform(0, 0.5)) * np.pi / num_classes
    freqs = np.linspace(0.08, 0.3, num_classes)[rng.permutation(num_classes)]
    styles = []
    for c in range(num_classes):
        color = _hsv_to_rgb(hues[c], rng.uniform(0.35, 0.8), rng.uniform(0.35, 0.7))
        styles.append(
            ClassStyle(
                color=tuple(float(v) for v in color),
                noise=float(rng.uniform(0.02, 0.06)),
                stripe_amp=float(rng.uniform(0.12, 0.2)),
                stripe_freq=float(freqs[c]),
                stripe_angle=float(angles[c]),
            )
        )
    return tuple(styles)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


@dataclass(frozen=True)
class MosaicSpec:
    image_size: int = 64
    num_classes: int = 6
    # inclusive range; an int means a fixed grid
    tiles_per_side: Union[int, Tuple[int, int]] = (2, 4)
    texture_seed: int = 0
    class_palette: Optional[Tuple[ClassStyle, ...]] = None
    class_probs: Optional[Tuple[float, ...]] = None
    distinct_tiles: bool = False
    small_objects: Tuple[int, int] = (0, 2)
    small_object_radius: Tuple[int, int] = (3, 7)

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        lo, hi = self.tile_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid tiles_per_side {self.tiles_per_side}")
        if hi > self.image_size // 4:
            raise ConfigError("tiles would be narrower than 4 pixels")
        if self.distinct_tiles and hi * hi > self.num_classes:
            raise ConfigError("distinct_tiles needs tiles_per_side**2 <= num_classes")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=float)
            if p.shape != (self.num_classes,) or (p < 0).any() or p.sum() <= 0:
                raise ConfigError("class_probs must be a non-negative vector of length num_classes")
        if self.class_palette is not None and len(self.class_palette) != self.num_classes:
            raise ConfigError("class_palette length must equal num_classes")
        if self.small_objects[0] < 0 or self.small_objects[1] < self.small_objects[0]:
            raise ConfigError(f"invalid small_objects range {self.small_objects}")

    @property
    def tile_range(self) -> Tuple[int, int]:
        t = self.tiles_per_side
        return (t, t) if isinstance(t, int) else (int(t[0]), int(t[1]))

    @property
    def palette(self) -> Tuple[ClassStyle, ...]:
        if self.class_palette is not None:
            return self.class_palette
        return default_palette(self.num_classes, self.texture_seed)

    @property
    def probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        p = np.asarray(self.class_probs, dtype=float)
        return p / p.sum()


@dataclass
class ImagePatch:
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DataError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise DataError(f"{self.source_id}: non-finite pixel values")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DataError(f"{self.source_id}: pixel values outside [0, 1]")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise DataError(
                f"{self.source_id}: mask shape {self.mask.shape} != image shape {self.pixels.shape[:2]}"
            )

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def _cuts(rng: np.random.Generator, size: int, tiles: int) -> np.ndarray:
    """Tile boundaries with jitter, each tile at least 4 pixels wide."""
    base = np.linspace(0, size, tiles + 1)
    jitter = rng.uniform(-0.25, 0.25, tiles - 1) * (size / tiles)
    inner = np.round(base[1:-1] + jitter).astype(int)
    edges = np.concatenate([[0], inner, [size]])
    for k in range(1, tiles):
        edges[k] = np.clip(edges[k], edges[k - 1] + 4, size - 4 * (tiles - k))
    return edges


def generate_mosaic(spec: MosaicSpec, seed: int) -> ImagePatch:
    rng = np.random.default_rng([seed, spec.texture_seed])
    size, n_cls = spec.image_size, spec.num_classes
    lo, hi = spec.tile_range
    tiles = int(rng.integers(lo, hi + 1))

    if spec.distinct_tiles:
        tile_classes = rng.choice(n_cls, size=tiles * tiles, replace=False, p=None)
    else:
        tile_classes = rng.choice(n_cls, size=tiles * tiles, p=spec.probs)
    rows, cols = _cuts(rng, size, tiles), _cuts(rng, size, tiles)
    mask = np.empty((size, size), dtype=np.int64)
    for r in range(tiles):
        for c in range(tiles):
            mask[rows[r]:rows[r + 1], cols[c]:cols[c + 1]] = tile_classes[r * tiles + c]

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    n_obj = int(rng.integers(spec.small_objects[0], spec.small_objects[1] + 1))
    for _ in range(n_obj):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(spec.small_object_radius[0], spec.small_object_radius[1] + 1, 2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        under = mask[int(cy), int(cx)]
        cls = int(rng.choice([k for k in range(n_cls) if k != under]))
        mask[inside] = cls

    pixels = np.empty((size, size, 3), dtype=np.float64)
    for cls, style in enumerate(spec.palette):
        sel = mask == cls
        if not sel.any():
            continue
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(
            2 * np.pi * style.stripe_freq
            * (xx[sel] * np.cos(style.stripe_angle) + yy[sel] * np.sin(style.stripe_angle))
            + phase
        )
        noise = rng.normal(0.0, style.noise, (int(sel.sum()), 3))
        pixels[sel] = np.asarray(style.color) + style.stripe_amp * wave[:, None] + noise

    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    return ImagePatch(pixels=pixels.astype(np.float32), mask=mask, source_id=f"mosaic_{seed:06d}")


def count_classes(mask: np.ndarray) -> int:
    """Number of distinct ground-object classes present in ``mask``."""
    return int(np.unique(np.asarray(mask)).size)


def generate_dataset(spec: MosaicSpec, count: int, seed: int = 0) -> List[ImagePatch]:
    # disjoint per-image seeds for different dataset seeds
    return [generate_mosaic(spec, seed * 1_000_003 + k) for k in range(count)]


def save_dataset(patches: Sequence[ImagePatch], root: Union[str, Path]) -> Path:
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for p in patches:
        rgb = np.round(p.pixels * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / IMAGE_DIR / f"{p.source_id}.png")
        if p.mask is not None:
            if p.mask.max() > 255:
                raise DataError("class indices above 255 cannot be stored as 8-bit masks")
            (root / MASK_DIR).mkdir(exist_ok=True)
            Image.fromarray(p.mask.astype(np.uint8), mode="L").save(root / MASK_DIR / f"{p.source_id}.png")
    return root


def load_dataset(
    path: Union[str, Path],
    with_masks: bool = True,
    size: Optional[int] = None,
) -> List[ImagePatch]:
    """Load ``images/*`` (and ``masks/*`` with the same stem) in filename order.

    Images larger than ``size`` are center-cropped; smaller ones are rejected.
    """
    root = Path(path)
    img_dir = root / IMAGE_DIR
    if not img_dir.is_dir():
        raise DataError(f"{root} has no {IMAGE_DIR}/ directory")
    files = sorted(f for f in img_dir.iterdir() if f.suffix.lower() in _EXTENSIONS)
    masks_by_stem = {}
    if with_masks:
        mask_dir = root / MASK_DIR
        if mask_dir.is_dir():
            masks_by_stem = {f.stem: f for f in mask_dir.iterdir() if f.suffix.lower() in _EXTENSIONS}

    patches = []
    for f in files:
        with Image.open(f) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        mask = None
        if with_masks:
            if f.stem not in masks_by_stem:
                raise DataError(f"missing mask for {f.name}")
            with Image.open(masks_by_stem[f.stem]) as im:
                if im.mode not in ("L", "P", "I", "I;16"):
                    raise DataError(f"mask {f.stem} is not single-channel (mode {im.mode})")
                mask = np.asarray(im).astype(np.int64)
            if mask.shape != pixels.shape[:2]:
                raise DataError(f"mask/image size mismatch for {f.name}: {mask.shape} vs {pixels.shape[:2]}")
        if size is not None:
            pixels, mask = _center_crop(pixels, mask, size, f.name)
        patches.append(ImagePatch(pixels=pixels, mask=mask, source_id=f.stem))
    return patches


def _center_crop(pixels, mask, size, name):
    h, w = pixels.shape[:2]
    if h < size or w < size:
        raise DataError(f"{name} is {h}x{w}, smaller than the configured {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    pixels = pixels[top:top + size, left:left + size]
    if mask is not None:
        mask = mask[top:top + size, left:left + size]
    return pixels, mask


def stack_pixels(patches: Sequence[ImagePatch]):
    """``N x C x H x W`` float tensor of the patches' pixels."""
    import torch

    sizes = {p.size for p in patches}
    if len(sizes) != 1:
        raise DataError(f"patches have differing sizes {sorted(sizes)}")
    arr = np.stack([p.pixels for p in patches]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
