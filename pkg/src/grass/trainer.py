"""Two-stage training loop: instance-discrimination warm-up, then guided sampling.

Epochs are 1-based. Epoch ``e_c`` is a warm-up epoch iff ``e_c <= warmup_epochs``.
A guided batch is processed in two passes. Pass 1 computes the loss on the
augmented views and back-propagates only to the feature maps. The resulting
LAMs pick a DACrop per view. Pass 2 recomputes the loss on the cropped views
and takes the single optimizer step.
"""
from __future__ import annotations

import contextlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .augment import augment_view, view_rng
from .config import RunConfig, TrainConfig, from_dict, to_dict
from .contrastive import batch_loss
from .errors import ConfigError, DataError, NumericError, UsageError
from .evalseg import object_count_stats
from .lamcore import dacrop, extract_dar, guided_resample, lam_batch
from .model import GrassNet, grad_wrt_feature
from .synthdata import ImagePatch, stack_pixels

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "grass-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class BatchResult:
    epoch: int
    index: int
    stage: str
    loss: float
    pass1_loss: Optional[float] = None
    boxes: Optional[list] = None


class RunLog(list):
    """Per-epoch records; optionally mirrored to an append-only JSONL file."""

    def __init__(self, path: Union[str, Path, None] = None, records=()):
        super().__init__(records)
        self.path = Path(path) if path else None

    def append(self, record: dict):
        if self and record["epoch"] <= self[-1]["epoch"]:
            raise DataError("run log epochs must increase")
        super().append(record)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @classmethod
    def read(cls, path) -> "RunLog":
        with open(path) as fh:
            return cls(None, [json.loads(line) for line in fh if line.strip()])


def _build_optimizer(params, cfg) -> torch.optim.Optimizer:
    if cfg.kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


@contextlib.contextmanager
def _frozen_buffers(module: torch.nn.Module):
    saved = {k: v.clone() for k, v in module.named_buffers()}
    try:
        yield
    finally:
        with torch.no_grad():
            for k, v in module.named_buffers():
                v.copy_(saved[k])


class Trainer:
    """Owns the model, optimizer and epoch counter for one pretraining run."""

    def __init__(self, cfg: TrainConfig, patches: Sequence[ImagePatch], observers: Sequence[Callable] = ()):
        cfg.validate()
        if len(patches) < 2:
            raise DataError("need at least two images to form negatives")
        self.cfg = cfg
        self.images = stack_pixels(patches)
        self.source_ids = [p.source_id for p in patches]
        self.masks = None
        if all(p.mask is not None for p in patches):
            self.masks = [p.mask for p in patches]
        if self.images.shape[-1] != cfg.encoder.input_size or self.images.shape[-2] != cfg.encoder.input_size:
            raise ConfigError(
                f"images are {tuple(self.images.shape[-2:])} but encoder.input_size is {cfg.encoder.input_size}"
            )
        torch.manual_seed(cfg.seed)
        self.model = GrassNet(cfg.encoder, cfg.projector)
        self.optimizer = _build_optimizer(self.model.parameters(), cfg.optimizer)
        self.epoch = 0
        self.observers = list(observers)
        self._pool = None
        if not cfg.reference_mode and cfg.num_workers > 1:
            self._pool = ThreadPoolExecutor(cfg.num_workers)

    # -- data ---------------------------------------------------------------

    def stage(self, epoch: int) -> str:
        return "warmup" if epoch <= self.cfg.warmup_epochs else "guided"

    def batches(self, epoch: int) -> List[np.ndarray]:
        """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
        order = np.random.default_rng([self.cfg.seed, epoch, 0xBA7C]).permutation(len(self.images))
        size = self.cfg.batch_size
        return [order[k:k + size] for k in range(0, len(order), size) if len(order[k:k + size]) >= 2]

    def augment(self, epoch: int, index: int, idx: np.ndarray):
        cfg = self.cfg.augment
        key = (self.cfg.seed, epoch, index)
        jobs = [(i, j) for i in range(len(idx)) for j in range(cfg.K)]

        def one(ij):
            i, j = ij
            return augment_view(self.images[idx[i]], cfg, view_rng(key, i, j), i, j, self.source_ids[idx[i]])

        results = list(self._pool.map(one, jobs)) if self._pool else [one(ij) for ij in jobs]
        views = torch.stack([v for v, _ in results]).reshape(len(idx), cfg.K, *self.images.shape[1:])
        records = [[results[i * cfg.K + j][1] for j in range(cfg.K)] for i in range(len(idx))]
        return views, records

    # -- steps --------------------------------------------------------------

    def _loss(self, views: torch.Tensor):
        n, k = views.shape[:2]
        feat, proj = self.model(views.reshape(n * k, *views.shape[2:]))
        loss, _ = batch_loss(proj.reshape(n, k, -1), self.cfg.loss)
        return loss, feat

    def _check(self, loss: torch.Tensor, epoch: int, index: int, which: str):
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite {which} loss at epoch {epoch}, batch {index}: {loss.item()}")

    def _update(self, loss: torch.Tensor):
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

    def warmup_step(self, views, epoch=0, index=0) -> BatchResult:
        loss, _ = self._loss(views)
        self._check(loss, epoch, index, "warm-up")
        self._update(loss)
        return BatchResult(epoch, index, "warmup", loss.item())

    def guided_pass1(self, views: torch.Tensor):
        """Loss on ``views`` and its gradient w.r.t. each view's feature map.

        Parameters, their ``.grad`` fields, and module buffers are left untouched.
        """
        n, k = views.shape[:2]
        with _frozen_buffers(self.model):
            with torch.no_grad():
                feat = self.model.encode(views.reshape(n * k, *views.shape[2:]))
            feat = feat.detach().requires_grad_(True)
            loss, _ = batch_loss(self.model.project(feat).reshape(n, k, -1), self.cfg.loss)
            grad = grad_wrt_feature(loss, feat)
        return loss.detach(), feat.detach(), grad

    def guided_step(self, views, epoch=0, index=0) -> BatchResult:
        loss1, feat, grad = self.guided_pass1(views)
        self._check(loss1, epoch, index, "pass-1")
        resampled, boxes = guided_resample(
            views, feat, grad, self.cfg.threshold, self.cfg.rectify_lam, self.cfg.min_box
        )
        loss2, _ = self._loss(resampled)
        self._check(loss2, epoch, index, "pass-2")
        self._update(loss2)
        return BatchResult(epoch, index, "guided", loss2.item(), loss1.item(), boxes)

    def attention_examples(self, idx: Sequence[int], epoch: Optional[int] = None) -> List[dict]:
        """Per-view LAM, DAR and DACrop for images ``idx`` under the current weights.

        Views are drawn exactly as in training epoch ``epoch`` (default: next epoch),
        batch slot 0. Nothing in the model is updated.
        """
        idx = np.asarray(idx)
        if len(idx) < 2:
            raise UsageError("need at least two images to compute the loss")
        epoch = self.epoch + 1 if epoch is None else epoch
        views, records = self.augment(epoch, 0, idx)
        self.model.train()
        _, feat, grad = self.guided_pass1(views)
        n, k = views.shape[:2]
        h, w = views.shape[-2:]
        lams, _ = lam_batch(feat, grad, (h, w), self.cfg.rectify_lam)
        out = []
        for b in range(n * k):
            i, j = divmod(b, k)
            dar = extract_dar(lams[b].numpy(), self.cfg.threshold)
            out.append({
                "record": records[i][j],
                "view": views[i, j],
                "lam": lams[b].numpy(),
                "dar": dar,
                "crop": dacrop(views[i, j], dar, self.cfg.min_box),
            })
        return out

    # -- epochs -------------------------------------------------------------

    def _run_epoch(self, epoch: int, guided: bool) -> dict:
        t0 = time.perf_counter()
        self.model.train()
        results, counts = [], None
        for index, idx in enumerate(self.batches(epoch)):
            views, records = self.augment(epoch, index, idx)
            res = self.guided_step(views, epoch, index) if guided else self.warmup_step(views, epoch, index)
            results.append(res)
            if index == 0 and self.masks is not None and self.cfg.log_object_counts:
                counts = object_count_stats([self.masks[i] for i in idx], records, res.boxes)
            for obs in self.observers:
                obs(self, res, idx, views, records)
        self.epoch = epoch
        losses = [r.loss for r in results]
        record = {
            "epoch": epoch,
            "stage": "guided" if guided else "warmup",
            "mean_loss": float(np.mean(losses)),
            "batch_losses": losses,
            "wall_time": time.perf_counter() - t0,
        }
        if guided:
            record["pass1_losses"] = [r.pass1_loss for r in results]
            areas = [b[2] * b[3] for r in results for b in r.boxes]
            record["mean_crop_area"] = float(np.mean(areas)) / float(self.images.shape[-1] * self.images.shape[-2])
        if counts is not None:
            record["object_counts"] = counts
        return record

    def train_epoch_warmup(self) -> dict:
        epoch = self.epoch + 1
        if self.stage(epoch) != "warmup":
            raise ConfigError(f"epoch {epoch} is past the warm-up ({self.cfg.warmup_epochs} epochs)")
        return self._run_epoch(epoch, guided=False)

    def train_epoch_guided(self) -> dict:
        epoch = self.epoch + 1
        if self.stage(epoch) != "guided":
            raise ConfigError(f"epoch {epoch} is still within the warm-up ({self.cfg.warmup_epochs} epochs)")
        return self._run_epoch(epoch, guided=True)

    def run(self, out_dir: Union[str, Path, None] = None, until: Optional[int] = None) -> RunLog:
        """Train to ``total_epochs`` (or ``until``), checkpointing every ``checkpoint_every``."""
        out = Path(out_dir) if out_dir else None
        run_log = RunLog(out / "runlog.jsonl" if out else None)
        last = min(self.cfg.total_epochs, until or self.cfg.total_epochs)
        while self.epoch < last:
            epoch = self.epoch + 1
            rec = self.train_epoch_warmup() if self.stage(epoch) == "warmup" else self.train_epoch_guided()
            run_log.append(rec)
            log.info("epoch %d [%s] loss %.4f (%.1fs)", epoch, rec["stage"], rec["mean_loss"], rec["wall_time"])
            if out and (epoch % self.cfg.checkpoint_every == 0 or epoch == last):
                self.save_checkpoint(out / f"checkpoint_{epoch:04d}.pt")
                self.save_checkpoint(out / "checkpoint_last.pt")
        return run_log

    # -- checkpoints --------------------------------------------------------

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "epoch": self.epoch,
                "config": to_dict(self.cfg),
                "loss": to_dict(self.cfg.loss),
                "encoder": self.model.encoder.state_dict(),
                "projector": self.model.projector.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
            },
            path,
        )
        return path

    @classmethod
    def from_checkpoint(cls, path, patches, observers=(), cfg: Optional[TrainConfig] = None) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(cfg or from_dict(TrainConfig, state["config"]), patches, observers)
        trainer.model.encoder.load_state_dict(state["encoder"])
        trainer.model.projector.load_state_dict(state["projector"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
        trainer.epoch = state["epoch"]
        return trainer


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a GraSS checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {state.get('version')}")
    return state


def load_model(path) -> GrassNet:
    """Encoder + projector from a checkpoint."""
    state = load_checkpoint(path)
    cfg = from_dict(TrainConfig, state["config"])
    net = GrassNet(cfg.encoder, cfg.projector)
    net.encoder.load_state_dict(state["encoder"])
    net.projector.load_state_dict(state["projector"])
    return net


def run(cfg: TrainConfig, patches, out_dir=None, observers=()):
    """Fresh run from ``cfg``; returns ``(trainer, run_log)``."""
    trainer = Trainer(cfg, patches, observers)
    return trainer, trainer.run(out_dir)
