"""Loss attention maps, discrimination attention regions, and DACrop.

The loss attention map (LAM) of one view is the gradient-weighted channel mean
of its feature map. Weights are the spatially averaged loss gradients. The
map is bilinearly resized to the view and min-max normalised. The DAR is the
4-connected super-threshold component with the highest peak. DACrop cuts the
view to the DAR's bounding box and resizes it back to full size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, NumericError, UsageError
from .imageops import Box, clamp_box, crop_resize
from .synthdata import ImagePatch

MIN_BOX = 8
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class LossAttentionMap:
    values: np.ndarray
    raw_range: Tuple[float, float]

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DiscriminationAttentionRegion:
    pixel_set: np.ndarray
    peak: float
    box: Box
    fallback: bool = False  # True when nothing exceeded the threshold


def _activation(feat: torch.Tensor, grad: torch.Tensor, rectify: bool) -> torch.Tensor:
    # feat, grad: B x D x h x w  ->  B x h x w
    weights = grad.mean(dim=(-2, -1), keepdim=True)
    m = (weights * feat).mean(dim=-3)
    return m.clamp_min(0) if rectify else m


def lam_batch(feat: torch.Tensor, grad: torch.Tensor, target_hw, rectify: bool = False):
    """Normalised LAMs for a batch: returns ``(B x H x W values, B x 2 raw ranges)``."""
    if feat.shape != grad.shape:
        raise UsageError(f"feature {tuple(feat.shape)} and gradient {tuple(grad.shape)} shapes differ")
    if not (torch.isfinite(feat).all() and torch.isfinite(grad).all()):
        raise NumericError("non-finite feature map or gradient")
    with torch.no_grad():
        m = _activation(feat.detach(), grad.detach(), rectify)
        m = F.interpolate(m[:, None], size=tuple(target_hw), mode="bilinear", align_corners=False)[:, 0]
        lo = m.amin(dim=(-2, -1), keepdim=True)
        hi = m.amax(dim=(-2, -1), keepdim=True)
        span = hi - lo
        degenerate = span <= 0
        norm = torch.where(degenerate, torch.zeros_like(m), (m - lo) / torch.where(degenerate, torch.ones_like(span), span))
    ranges = torch.cat([lo.flatten(1), hi.flatten(1)], dim=1)
    return norm, ranges


def compute_lam(feat, grad, target_hw, rectify: bool = False) -> LossAttentionMap:
    """LAM of a single view; ``feat``/``grad`` are ``D x h x w`` (tensors or arrays)."""
    feat = torch.as_tensor(np.asarray(feat) if not isinstance(feat, torch.Tensor) else feat)
    grad = torch.as_tensor(np.asarray(grad) if not isinstance(grad, torch.Tensor) else grad)
    if feat.shape != grad.shape:
        raise UsageError(f"feature {tuple(feat.shape)} and gradient {tuple(grad.shape)} shapes differ")
    if feat.dim() != 3:
        raise UsageError("expected a D x h x w feature map")
    values, ranges = lam_batch(feat[None], grad[None], target_hw, rectify)
    return LossAttentionMap(values[0].cpu().numpy(), (float(ranges[0, 0]), float(ranges[0, 1])))


def extract_dar(lam, t: float) -> DiscriminationAttentionRegion:
    """Highest-peak 4-connected component of ``lam > t``.

    Ties on the peak go to the larger component, then to the component whose
    first peak pixel (row-major) comes first. If no pixel exceeds ``t`` the
    whole map is returned with ``fallback=True``.
    """
    if not (0.0 <= t < 1.0):
        raise ConfigError(f"threshold must be in [0, 1), got {t}")
    values = lam.values if isinstance(lam, LossAttentionMap) else np.asarray(lam)
    h, w = values.shape
    labels, n = ndimage.label(values > t, structure=_FOUR_CONNECTED)
    if n == 0:
        full = np.ones((h, w), dtype=bool)
        return DiscriminationAttentionRegion(full, float(values.max()), (0, 0, h, w), fallback=True)

    idx = np.arange(1, n + 1)
    peaks = ndimage.maximum(values, labels, idx)
    sizes = ndimage.sum_labels(np.ones_like(values), labels, idx)
    # first row-major position of each component's peak value
    flat_labels = labels.ravel()
    flat_vals = values.ravel()
    at_peak = (flat_labels > 0) & (flat_vals == np.asarray(peaks)[np.maximum(flat_labels - 1, 0)])
    positions = np.flatnonzero(at_peak)
    first_peak = np.full(n, values.size)
    np.minimum.at(first_peak, flat_labels[positions] - 1, positions)

    best = min(range(n), key=lambda c: (-peaks[c], -sizes[c], first_peak[c]))
    pixel_set = labels == best + 1
    rows = np.flatnonzero(pixel_set.any(axis=1))
    cols = np.flatnonzero(pixel_set.any(axis=0))
    box = (int(cols[0]), int(rows[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))
    return DiscriminationAttentionRegion(pixel_set, float(peaks[best]), box)


def dacrop_box(dar: DiscriminationAttentionRegion, height: int, width: int, min_box: int = MIN_BOX) -> Box:
    return clamp_box(dar.box, min_box, height, width)


def dacrop(view, dar: DiscriminationAttentionRegion, min_box: int = MIN_BOX):
    """Crop ``view`` to the DAR box (grown to ``min_box``) and resize back.

    ``view`` is an :class:`ImagePatch` (mask carried along by nearest
    resampling) or a ``C x H x W`` tensor.
    """
    if isinstance(view, ImagePatch):
        h, w = view.size
        box = dacrop_box(dar, h, w, min_box)
        pix = crop_resize(torch.from_numpy(view.pixels).permute(2, 0, 1), box, (h, w), "bilinear")
        mask = None
        if view.mask is not None:
            mask = crop_resize(torch.from_numpy(view.mask), box, (h, w), "nearest").numpy()
        pixels = pix.permute(1, 2, 0).clamp(0, 1).numpy()
        return ImagePatch(pixels=pixels, mask=mask, source_id=view.source_id)
    h, w = view.shape[-2:]
    box = dacrop_box(dar, h, w, min_box)
    return crop_resize(view, box, (h, w), "bilinear")


def guided_resample(
    views: torch.Tensor,
    feat: torch.Tensor,
    grad: torch.Tensor,
    t: float,
    rectify: bool = False,
    min_box: int = MIN_BOX,
) -> Tuple[torch.Tensor, List[Box]]:
    """LAM -> DAR -> DACrop for every view independently.

    ``views`` is ``N x K x C x H x W`` (or flat ``B x C x H x W``); ``feat`` and
    ``grad`` are the matching flat ``B x D x h x w`` maps. Returns the resampled
    views in the input shape and the crop box used for each view, in flat
    row-major ``(i, j)`` order.
    """
    shape = views.shape
    flat = views.reshape(-1, *shape[-3:])
    if feat.shape[0] != flat.shape[0]:
        raise UsageError(f"{flat.shape[0]} views but {feat.shape[0]} feature maps")
    h, w = shape[-2:]
    lams, _ = lam_batch(feat, grad, (h, w), rectify)
    lams = lams.cpu().numpy()
    out = torch.empty_like(flat)
    boxes = []
    for b in range(flat.shape[0]):
        box = dacrop_box(extract_dar(lams[b], t), h, w, min_box)
        out[b] = crop_resize(flat[b], box, (h, w), "bilinear")
        boxes.append(box)
    return out.reshape(shape), boxes
