"""K-view augmentation: image copy, random spectral jitter, random spatial crop.

Every view draws from its own generator seeded by ``(rng_state, i, j)``, so a
batch can be rebuilt view by view in any order or worker and still match.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import ConfigError, DataError
from .imageops import Box, crop_resize
from .synthdata import ImagePatch, stack_pixels


@dataclass
class SpectralConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.0
    blur_sigma: Tuple[float, float] = (0.1, 2.0)


@dataclass
class SpatialConfig:
    crop_scale: Tuple[float, float] = (0.2, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0


@dataclass
class AugmentConfig:
    K: int = 2
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.spectral, dict):
            self.spectral = SpectralConfig(**self.spectral)
        if isinstance(self.spatial, dict):
            self.spatial = SpatialConfig(**self.spatial)
        self.spatial.crop_scale = tuple(self.spatial.crop_scale)
        self.spatial.crop_ratio = tuple(self.spatial.crop_ratio)
        self.spectral.blur_sigma = tuple(self.spectral.blur_sigma)
        self.validate()

    def validate(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2 to have a positive partner, got {self.K}")
        lo, hi = self.spatial.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.spatial.crop_scale}")
        rlo, rhi = self.spatial.crop_ratio
        if not (0 < rlo <= rhi):
            raise ConfigError(f"invalid crop_ratio {self.spatial.crop_ratio}")

    @classmethod
    def identity(cls, K: int = 2) -> "AugmentConfig":
        """No colour change, full-image crop, no flips."""
        return cls(
            K=K,
            spectral=SpectralConfig(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0),
            spatial=SpatialConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_prob=0.0, vflip_prob=0.0),
        )


@dataclass(frozen=True)
class ViewRecord:
    """Geometry of one view in source-image coordinates."""

    source_index: int
    view_index: int
    source_id: str
    source_hw: Tuple[int, int]
    box: Box
    out_hw: Tuple[int, int]
    hflip: bool = False
    vflip: bool = False


def view_rng(rng_state, i: int, j: int) -> np.random.Generator:
    key = list(rng_state) if isinstance(rng_state, (tuple, list)) else [int(rng_state)]
    return np.random.default_rng([*key, i, j])


def sample_crop_box(rng: np.random.Generator, height: int, width: int, scale, ratio) -> Box:
    """Random-resized-crop box: area fraction from ``scale``, log-uniform aspect ``ratio``."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            return x, y, h, w
    # fall back to a centre crop at the clamped aspect ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, h, w


def _spectral(img: torch.Tensor, cfg: SpectralConfig, rng: np.random.Generator) -> torch.Tensor:
    if rng.uniform() < cfg.jitter_prob:
        ops = []
        if cfg.brightness > 0:
            f = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
            ops.append(lambda t, f=f: TF.adjust_brightness(t, f))
        if cfg.contrast > 0:
            f = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
            ops.append(lambda t, f=f: TF.adjust_contrast(t, f))
        if cfg.saturation > 0:
            f = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
            ops.append(lambda t, f=f: TF.adjust_saturation(t, f))
        if cfg.hue > 0:
            f = rng.uniform(-cfg.hue, cfg.hue)
            ops.append(lambda t, f=f: TF.adjust_hue(t, f))
        for k in rng.permutation(len(ops)):
            img = ops[k](img)
    if rng.uniform() < cfg.grayscale_prob:
        img = TF.rgb_to_grayscale(img, num_output_channels=img.shape[0])
    if rng.uniform() < cfg.blur_prob:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        k = max(3, int(2 * math.ceil(3 * sigma) + 1))
        img = TF.gaussian_blur(img, [k, k], [sigma, sigma])
    return img.clamp(0.0, 1.0)


def augment_view(
    image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator, i: int, j: int, source_id: str = ""
) -> Tuple[torch.Tensor, ViewRecord]:
    """One view of ``image`` (``C x H x W``): spectral first, then spatial."""
    _, h, w = image.shape
    out = _spectral(image, cfg.spectral, rng)
    box = sample_crop_box(rng, h, w, cfg.spatial.crop_scale, cfg.spatial.crop_ratio)
    hflip = bool(rng.uniform() < cfg.spatial.hflip_prob)
    vflip = bool(rng.uniform() < cfg.spatial.vflip_prob)
    out = crop_resize(out, box, (h, w), "bilinear")
    if hflip:
        out = out.flip(-1)
    if vflip:
        out = out.flip(-2)
    rec = ViewRecord(i, j, source_id, (h, w), box, (h, w), hflip, vflip)
    return out, rec


def augment_batch(
    batch, cfg: AugmentConfig, rng_state=None
) -> Tuple[torch.Tensor, List[List[ViewRecord]]]:
    """Augment a batch into ``N x K`` views.

    ``batch`` is a sequence of :class:`ImagePatch` or an ``N x C x H x W``
    tensor. Returns the view tensor ``N x K x C x H x W`` and a per-view
    ``ViewRecord`` grid. ``rng_state`` defaults to ``cfg.seed``.
    """
    if isinstance(batch, torch.Tensor):
        images, ids = batch, [str(k) for k in range(batch.shape[0])]
    else:
        images, ids = stack_pixels(batch), [p.source_id for p in batch]
    if rng_state is None:
        rng_state = cfg.seed
    n, c, h, w = images.shape
    views = torch.empty((n, cfg.K, c, h, w), dtype=images.dtype)
    records: List[List[ViewRecord]] = []
    for i in range(n):
        row = []
        for j in range(cfg.K):
            views[i, j], rec = augment_view(images[i], cfg, view_rng(rng_state, i, j), i, j, ids[i])
            row.append(rec)
        records.append(row)
    return views, records


def transport_mask(record: ViewRecord, source_mask) -> torch.Tensor:
    """Carry a class mask through the view's crop/resize/flip chain (nearest)."""
    mask = torch.as_tensor(np.asarray(source_mask)) if not isinstance(source_mask, torch.Tensor) else source_mask
    if tuple(mask.shape[-2:]) != tuple(record.source_hw):
        raise DataError(f"mask shape {tuple(mask.shape)} does not match view source {record.source_hw}")
    out = crop_resize(mask, record.box, record.out_hw, "nearest")
    if record.hflip:
        out = out.flip(-1)
    if record.vflip:
        out = out.flip(-2)
    return out
