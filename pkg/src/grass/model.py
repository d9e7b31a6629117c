"""Encoder E, projection head P, and gradient access to the feature map F."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ModelError, UsageError

ARCHITECTURES = ("toy-convnet", "resnet-style")


@dataclass
class EncoderSpec:
    architecture: str = "toy-convnet"
    feature_dim: int = 32
    stride: int = 8
    in_channels: int = 3
    input_size: int = 64
    # toy-convnet only
    width: int = 32
    bias: bool = True
    norm: bool = True
    # resnet-style only
    depth: int = 18

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}")
        if self.architecture == "toy-convnet" and (self.stride < 1 or self.stride & (self.stride - 1)):
            raise ConfigError(f"toy-convnet stride must be a power of two, got {self.stride}")
        if self.architecture == "resnet-style":
            if self.depth not in (18, 34, 50):
                raise ConfigError(f"resnet depth must be 18, 34 or 50, got {self.depth}")
            if self.stride != 32:
                raise ConfigError("resnet-style encoders have stride 32")


@dataclass
class ProjectorSpec:
    output_dim: int = 64
    hidden_dims: Tuple[int, ...] = (128,)
    batch_norm: bool = True

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)


class ToyConvNet(nn.Module):
    """Stride-2 conv blocks until the requested stride, then one stride-1 block."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        n_down = spec.stride.bit_length() - 1
        chans = [spec.in_channels] + [spec.width] * n_down + [spec.feature_dim]
        layers = []
        for k in range(n_down + 1):
            stride = 2 if k < n_down else 1
            layers.append(nn.Conv2d(chans[k], chans[k + 1], 3, stride=stride, padding=1, bias=spec.bias))
            if spec.norm:
                layers.append(nn.GroupNorm(min(8, chans[k + 1]), chans[k + 1], affine=spec.bias))
            layers.append(nn.ReLU(inplace=False))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ResNetTrunk(nn.Module):
    """torchvision ResNet up to the last residual stage (no pooling / fc)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        import torchvision

        net = getattr(torchvision.models, f"resnet{spec.depth}")(weights=None)
        if spec.in_channels != 3:
            net.conv1 = nn.Conv2d(spec.in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        out = net.fc.in_features
        self.proj = nn.Identity() if out == spec.feature_dim else nn.Conv2d(out, spec.feature_dim, 1)

    def forward(self, x):
        return self.proj(self.body(x))


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.architecture == "toy-convnet":
        return ToyConvNet(spec)
    return ResNetTrunk(spec)


class Projector(nn.Module):
    """Global average pool, MLP, L2 normalisation.

    With ``batch_norm`` the hidden layers are batch-normalised, which keeps
    the toy encoder from collapsing but needs batches of two or more in
    training mode.
    """

    def __init__(self, in_dim: int, spec: ProjectorSpec):
        super().__init__()
        dims = [in_dim, *spec.hidden_dims, spec.output_dim]
        layers = []
        for k in range(len(dims) - 1):
            hidden = k < len(dims) - 2
            layers.append(nn.Linear(dims[k], dims[k + 1], bias=not (hidden and spec.batch_norm)))
            if hidden:
                if spec.batch_norm:
                    layers.append(nn.BatchNorm1d(dims[k + 1]))
                layers.append(nn.ReLU(inplace=False))
        self.mlp = nn.Sequential(*layers)

    def forward(self, feat):
        pooled = feat.mean(dim=(-2, -1))
        return F.normalize(self.mlp(pooled), dim=-1, eps=1e-12)


class GrassNet(nn.Module):
    def __init__(self, encoder_spec: EncoderSpec = None, projector_spec: ProjectorSpec = None):
        super().__init__()
        self.encoder_spec = encoder_spec or EncoderSpec()
        self.projector_spec = projector_spec or ProjectorSpec()
        self.encoder = build_encoder(self.encoder_spec)
        self.projector = Projector(self.encoder_spec.feature_dim, self.projector_spec)

    def encode(self, views: torch.Tensor) -> torch.Tensor:
        """Spatial feature map ``F`` (``B x D x h x w``) of a ``B x C x H x W`` batch."""
        spec = self.encoder_spec
        if views.dim() != 4 or views.shape[1] != spec.in_channels:
            raise ModelError(f"expected B x {spec.in_channels} x H x W input, got {tuple(views.shape)}")
        if views.shape[-1] != spec.input_size or views.shape[-2] != spec.input_size:
            raise ModelError(f"expected {spec.input_size}x{spec.input_size} views, got {tuple(views.shape[-2:])}")
        return self.encoder(views)

    def project(self, feat: torch.Tensor) -> torch.Tensor:
        return self.projector(feat)

    def forward(self, views: torch.Tensor):
        feat = self.encode(views)
        return feat, self.project(feat)

    def feature_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        s = self.encoder_spec.stride
        return self.encoder_spec.feature_dim, -(-height // s), -(-width // s)


def grad_wrt_feature(loss: torch.Tensor, feat: torch.Tensor, retain_graph: bool = False) -> torch.Tensor:
    """Exact ``dL/dF`` by reverse mode, without touching any parameter ``.grad``."""
    if loss.dim() != 0:
        raise UsageError("loss must be a scalar")
    if not feat.requires_grad or not loss.requires_grad:
        raise UsageError("feature map is detached from the loss graph")
    (grad,) = torch.autograd.grad(loss, feat, retain_graph=retain_graph, allow_unused=True)
    if grad is None:
        raise UsageError("loss does not depend on the given feature map")
    return grad


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
