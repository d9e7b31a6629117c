"""Instance-discrimination contrastive loss over ``N x K`` projections.

``excluded-positives`` (default)::

    l_ij = -log( sum_{n != j} exp(s(ij, in)) / sum_{m != i} sum_n exp(s(ij, mn)) )

with ``s = cos / tau``. The numerator pools all positives of the anchor and the
denominator holds only views of *other* instances, so ``l_ij`` can be negative.

``standard-ntxent`` is the usual form: each positive is scored against every
other view (positives included) and the K-1 positive terms are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch

from .errors import ConfigError

FORMULATIONS = ("excluded-positives", "standard-ntxent")


@dataclass
class LossConfig:
    temperature: float = 0.5
    formulation: str = "excluded-positives"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.formulation not in FORMULATIONS:
            raise ConfigError(f"unknown loss formulation {self.formulation!r}")


def similarity(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis."""
    return torch.nn.functional.cosine_similarity(f_a, f_b, dim=-1, eps=1e-12)


def _masks(n: int, k: int, device) -> Tuple[torch.Tensor, torch.Tensor]:
    inst = torch.arange(n, device=device).repeat_interleave(k)
    same = inst[:, None] == inst[None, :]
    eye = torch.eye(n * k, dtype=torch.bool, device=device)
    return same & ~eye, ~same


def instance_losses(f: torch.Tensor, cfg: LossConfig = None) -> torch.Tensor:
    """All ``l_ij`` as an ``N x K`` tensor. ``f`` is ``N x K x D'`` (unit norm)."""
    cfg = cfg or LossConfig()
    if f.dim() != 3:
        raise ConfigError(f"projections must be N x K x D', got shape {tuple(f.shape)}")
    n, k, _ = f.shape
    if n < 2:
        raise ConfigError("need at least two instances (N >= 2) for a non-empty negative set")
    if k < 2:
        raise ConfigError("need at least two views per instance (K >= 2)")
    flat = f.reshape(n * k, -1)
    logits = flat @ flat.T / cfg.temperature
    pos, neg = _masks(n, k, f.device)
    neg_inf = torch.finfo(logits.dtype).min

    if cfg.formulation == "excluded-positives":
        log_num = torch.logsumexp(logits.masked_fill(~pos, neg_inf), dim=1)
        log_den = torch.logsumexp(logits.masked_fill(~neg, neg_inf), dim=1)
        loss = log_den - log_num
    else:
        not_self = pos | neg
        log_den = torch.logsumexp(logits.masked_fill(~not_self, neg_inf), dim=1)
        per_pair = (log_den[:, None] - logits) * pos
        loss = per_pair.sum(dim=1) / (k - 1)
    return loss.reshape(n, k)


def instance_loss(i: int, j: int, f: torch.Tensor, cfg: LossConfig = None) -> torch.Tensor:
    return instance_losses(f, cfg)[i, j]


def batch_loss(f: torch.Tensor, cfg: LossConfig = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean of all ``N*K`` instance losses, plus the ``N x K`` losses themselves."""
    per = instance_losses(f, cfg)
    return per.mean(), per
