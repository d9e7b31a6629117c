"""Small tensor image helpers shared by augmentation, DACrop and mask transport.

Boxes are ``(x, y, h, w)``: ``x`` is the left column, ``y`` the top row.
"""
from __future__ import annotations

from typing import Tuple

import torch
import torch.nn.functional as F

Box = Tuple[int, int, int, int]


def crop_resize(img: torch.Tensor, box: Box, out_hw: Tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Crop ``img`` (``[..., H, W]``) to ``box`` and resample to ``out_hw``.

    ``mode`` is ``"bilinear"`` for continuous data and ``"nearest"`` for
    categorical rasters. Same-size output is returned as an exact slice copy.
    """
    x, y, h, w = box
    if h <= 0 or w <= 0:
        raise ValueError(f"empty crop box {box}")
    if y < 0 or x < 0 or y + h > img.shape[-2] or x + w > img.shape[-1]:
        raise ValueError(f"crop box {box} outside image of size {tuple(img.shape[-2:])}")
    patch = img[..., y:y + h, x:x + w]
    if (h, w) == tuple(out_hw):
        return patch.clone()
    lead = patch.shape[:-2]
    flat = patch.reshape(-1, 1, h, w)
    if mode == "nearest":
        # nearest on integer labels: run in float, labels are small ints so the cast is exact
        out = F.interpolate(flat.double(), size=tuple(out_hw), mode="nearest-exact")
        out = out.to(img.dtype)
    elif mode == "bilinear":
        out = F.interpolate(flat, size=tuple(out_hw), mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return out.reshape(*lead, *out_hw)


def resize(img: torch.Tensor, out_hw: Tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    return crop_resize(img, (0, 0, img.shape[-2], img.shape[-1]), out_hw, mode)


def clamp_box(box: Box, min_size: int, height: int, width: int) -> Box:
    """Grow ``box`` symmetrically to at least ``min_size`` per side, kept inside the image."""
    x, y, h, w = box
    y, h = _grow_1d(y, h, min(min_size, height), height)
    x, w = _grow_1d(x, w, min(min_size, width), width)
    return x, y, h, w


def _grow_1d(start: int, length: int, target: int, limit: int) -> Tuple[int, int]:
    if length >= target:
        return start, length
    extra = target - length
    start -= extra // 2
    start = max(0, min(start, limit - target))
    return start, target
