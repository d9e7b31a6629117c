"""Frozen-encoder segmentation fine-tuning, pixel metrics, and object counting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import ViewRecord, transport_mask
from .errors import ConfigError, DataError, GrassError
from .imageops import crop_resize
from .model import GrassNet, parameter_hash
from .synthdata import ImagePatch, count_classes, stack_pixels


class UndefinedMetricsError(GrassError):
    """Raised for an empty confusion matrix."""


def confusion_matrix(target, pred, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    target = np.asarray(target).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if target.shape != pred.shape:
        raise DataError("prediction and target sizes differ")
    if target.size and (target.min() < 0 or target.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes):
        raise ConfigError(f"class index outside [0, {num_classes})")
    return np.bincount(num_classes * target + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class SegMetrics:
    iou: np.ndarray  # nan where the class is absent from both prediction and target
    acc: np.ndarray  # nan where the class is absent from the target
    miou: float
    oa: float
    macc: float
    confusion: np.ndarray = field(repr=False)

    def summary(self) -> str:
        return f"OA / mIoU / mAcc: {100 * self.oa:.2f} / {100 * self.miou:.2f} / {100 * self.macc:.2f}"

    def as_dict(self) -> dict:
        return {
            "oa": self.oa,
            "miou": self.miou,
            "macc": self.macc,
            "iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "acc": [None if np.isnan(v) else float(v) for v in self.acc],
        }

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "iou", "acc", "gt_pixels", "pred_pixels"])
        rows, cols = self.confusion.sum(axis=1), self.confusion.sum(axis=0)
        for c in range(len(self.iou)):
            name = class_names[c] if class_names else str(c)
            writer.writerow([name, _fmt(self.iou[c]), _fmt(self.acc[c]), int(rows[c]), int(cols[c])])
        buf.write(f"# {self.summary()}\n")
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.6f}"


def metrics_from_confusion(cm) -> SegMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
        raise DataError("confusion matrix must be square with non-negative counts")
    total = cm.sum()
    if total == 0:
        raise UndefinedMetricsError("confusion matrix is empty")
    tp = np.diag(cm).astype(float)
    rows, cols = cm.sum(axis=1).astype(float), cm.sum(axis=0).astype(float)
    union = rows + cols - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(rows > 0, tp / rows, np.nan)
    return SegMetrics(
        iou=iou,
        acc=acc,
        miou=float(np.nanmean(iou)),
        oa=float(tp.sum() / total),
        macc=float(np.nanmean(acc)),
        confusion=cm,
    )


class SegDecoder(nn.Module):
    def __init__(self, in_dim: int, num_classes: int, hidden_dim: int = 64, upsample_blocks: int = 1):
        super().__init__()
        layers: List[nn.Module] = []
        dim = in_dim
        for _ in range(upsample_blocks):
            layers += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(dim, hidden_dim, 3, padding=1),
                nn.ReLU(inplace=False),
            ]
            dim = hidden_dim
        if not upsample_blocks:
            layers += [nn.Conv2d(dim, hidden_dim, 3, padding=1), nn.ReLU(inplace=False)]
        layers.append(nn.Conv2d(hidden_dim, num_classes, 1))
        self.head = nn.Sequential(*layers)

    def forward(self, feat, out_hw):
        return F.interpolate(self.head(feat), size=tuple(out_hw), mode="bilinear", align_corners=False)


class SegmentationModel(nn.Module):
    def __init__(self, encoder: nn.Module, decoder: SegDecoder, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.num_classes = num_classes

    def forward(self, images):
        with torch.no_grad():
            feat = self.encoder(images)
        return self.decoder(feat, images.shape[-2:])

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        self.eval()
        out = [self(images[k:k + batch_size]).argmax(dim=1) for k in range(0, len(images), batch_size)]
        return torch.cat(out)


def _masks_tensor(patches: Sequence[ImagePatch]) -> torch.Tensor:
    if any(p.mask is None for p in patches):
        raise DataError("segmentation needs masks for every patch")
    return torch.from_numpy(np.stack([p.mask for p in patches]).astype(np.int64))


def select_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    k = max(1, int(round(fraction * n)))
    rng = np.random.default_rng([seed, 0x5E6])
    return np.sort(rng.choice(n, size=k, replace=False))


def finetune(
    net: GrassNet,
    patches: Sequence[ImagePatch],
    num_classes: int,
    cfg=None,
) -> SegmentationModel:
    """Train a decoder on top of ``net.encoder`` with the encoder frozen.

    ``cfg`` is a :class:`grass.config.FinetuneConfig`; a seeded ``cfg.fraction``
    of ``patches`` is used for training.
    """
    from .config import FinetuneConfig

    cfg = cfg or FinetuneConfig()
    masks = _masks_tensor(patches)
    if masks.max() >= num_classes:
        raise ConfigError(f"mask has class {int(masks.max())} but decoder has {num_classes} classes")

    encoder = net.encoder
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    before = parameter_hash(encoder)

    idx = select_subset(len(patches), cfg.fraction, cfg.seed)
    images = stack_pixels([patches[i] for i in idx])
    targets = masks[idx]
    with torch.no_grad():
        feats = torch.cat([encoder(images[k:k + 64]) for k in range(0, len(images), 64)])

    torch.manual_seed(cfg.seed)
    decoder = SegDecoder(net.encoder_spec.feature_dim, num_classes, cfg.decoder.hidden_dim, cfg.decoder.upsample_blocks)
    opt = torch.optim.SGD(decoder.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0xF17E])
    out_hw = images.shape[-2:]
    decoder.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(idx))
        for k in range(0, len(order), cfg.batch_size):
            b = order[k:k + cfg.batch_size]
            logits = decoder(feats[b], out_hw)
            loss = F.cross_entropy(logits, targets[b])
            opt.zero_grad()
            loss.backward()
            opt.step()

    if parameter_hash(encoder) != before:
        raise RuntimeError("encoder changed during fine-tuning")
    return SegmentationModel(encoder, decoder, num_classes)


def evaluate(model: SegmentationModel, patches: Sequence[ImagePatch], batch_size: int = 64) -> SegMetrics:
    """Single confusion matrix accumulated over every test pixel."""
    cm = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    for k in range(0, len(patches), batch_size):
        chunk = patches[k:k + batch_size]
        masks = _masks_tensor(chunk)
        pred = model.predict(stack_pixels(chunk), batch_size)
        cm += confusion_matrix(masks.numpy(), pred.numpy(), model.num_classes)
    return metrics_from_confusion(cm)


# --- object counting -------------------------------------------------------

ARMS = ("original", "random_crop", "grass")


def arm_stats(counts: Sequence[int], views_per_sample: int = 1) -> Dict[str, float]:
    counts = np.asarray(counts)
    return {
        "mean_classes": float(counts.mean()),
        "single_class": float((counts == 1).sum() / views_per_sample),
    }


def object_count_stats(
    source_masks: Sequence[np.ndarray],
    records: Sequence[Sequence[ViewRecord]],
    boxes: Optional[Sequence[Tuple[int, int, int, int]]] = None,
) -> Dict[str, Dict[str, float]]:
    """Distinct-class statistics for one batch, per arm.

    ``original`` counts the source patches. ``random_crop`` counts every
    augmented view (mask carried through its geometry). ``grass`` additionally
    applies each view's DACrop box. Single-class counts of view arms are
    averaged over the K views so all arms are on a per-sample scale.
    """
    k = len(records[0])
    out = {"original": arm_stats([count_classes(m) for m in source_masks])}
    view_masks = [transport_mask(rec, source_masks[i]) for i, row in enumerate(records) for rec in row]
    out["random_crop"] = arm_stats([count_classes(m.numpy()) for m in view_masks], k)
    if boxes is not None:
        crops = [crop_resize(m, box, m.shape[-2:], "nearest") for m, box in zip(view_masks, boxes)]
        out["grass"] = arm_stats([count_classes(m.numpy()) for m in crops], k)
    return out


def analyze_object_counts(run_log) -> List[dict]:
    """Flatten a run log's first-batch statistics into ``(epoch, stage, arm, ...)`` rows."""
    rows = []
    for rec in run_log:
        for arm, vals in (rec.get("object_counts") or {}).items():
            rows.append({"epoch": rec["epoch"], "stage": rec["stage"], "arm": arm, **vals})
    return rows


def summarize_object_counts(rows: Sequence[dict], last_epochs: Optional[int] = None) -> Dict[str, Dict[str, float]]:
    """Mean of each arm's statistics, over the final ``last_epochs`` epochs that observed GraSS."""
    guided = sorted({r["epoch"] for r in rows if r["arm"] == "grass"})
    keep = set(guided[-last_epochs:] if last_epochs else guided)
    out: Dict[str, Dict[str, float]] = {}
    for arm in ARMS:
        sel = [r for r in rows if r["arm"] == arm and r["epoch"] in keep]
        if sel:
            out[arm] = {
                "mean_classes": float(np.mean([r["mean_classes"] for r in sel])),
                "single_class": float(np.mean([r["single_class"] for r in sel])),
            }
    return out
