"""Shallow trainable discriminator heads over frozen extractor features.

Two layouts:

* single-scale: 2x avg-downsample, conv3x3 ch->256, lrelu, linear
  256*h*w->256, lrelu, linear 256->1.
* multi-scale: one patch branch per spatial tap (conv3x3 -> lrelu ->
  downsample -> conv3x3 -> 1, giving a grid of logits of at most 3x3)
  plus a linear-lrelu-linear branch on the token feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .bank import FeatureExtractorSpec, FeatureOutput

LRELU_SLOPE = 0.2
GRID = 3


class HeadError(ValueError):
    pass


@dataclass
class LogitSet:
    """Per-branch logits.  Spatial branches are (B, 1, g, g), token/MLP branches (B,)."""

    branches: list[torch.Tensor]

    @property
    def reduced(self) -> torch.Tensor:
        """Per-sample logit: mean over each branch's grid, summed over branches."""
        out = 0
        for b in self.branches:
            out = out + (b.flatten(1).mean(dim=1) if b.dim() > 1 else b)
        return out

    @property
    def batch_size(self) -> int:
        return self.branches[0].shape[0]


class SingleScaleHead(nn.Module):
    def __init__(self, shape, width: int = 256):
        super().__init__()
        ch, h, w = shape
        if h < 2 or w < 2:
            raise HeadError(f"spatial feature {shape} too small for 2x downsampling")
        self.conv = nn.Conv2d(ch, width, 3, padding=1)
        self.fc = nn.Linear(width * (h // 2) * (w // 2), width)
        self.out = nn.Linear(width, 1)

    def forward(self, x):
        x = F.avg_pool2d(x, 2)
        x = F.leaky_relu(self.conv(x), LRELU_SLOPE)
        x = F.leaky_relu(self.fc(x.flatten(1)), LRELU_SLOPE)
        return self.out(x).squeeze(1)


class PatchBranch(nn.Module):
    """conv3x3 -> lrelu -> downsample -> conv3x3 -> 1.

    Maps 14 or more wide are first halved until narrower than that, so ViT
    patch grids land on the same 3x3 output as small conv maps.  The downsample is 2x average pooling
    when that yields exactly 3x3, adaptive average pooling to 3x3
    otherwise; maps narrower than 3 keep their size.
    """

    def __init__(self, shape, width: int):
        super().__init__()
        ch, h, w = shape
        self.pre_down = 0
        while min(h, w) >= 4 * GRID + 2:
            h, w = h // 2, w // 2
            self.pre_down += 1
        self.grid = (min(h, GRID), min(w, GRID))
        self.in_hw = (h, w)
        self.conv = nn.Conv2d(ch, width, 3, padding=1)
        self.out = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x):
        for _ in range(self.pre_down):
            x = F.avg_pool2d(x, 2)
        x = F.leaky_relu(self.conv(x), LRELU_SLOPE)
        h, w = x.shape[-2:]
        if (h // 2, w // 2) == self.grid:
            x = F.avg_pool2d(x, 2)
        elif (h, w) != self.grid:
            x = F.adaptive_avg_pool2d(x, self.grid)
        return self.out(x)


class TokenBranch(nn.Module):
    def __init__(self, dim: int, width: int):
        super().__init__()
        self.fc = nn.Linear(dim, width)
        self.out = nn.Linear(width, 1)

    def forward(self, x):
        return self.out(F.leaky_relu(self.fc(x), LRELU_SLOPE)).squeeze(1)


class MultiScaleHead(nn.Module):
    def __init__(self, spec: FeatureExtractorSpec, width: int | None = None):
        super().__init__()
        (dim,) = spec.token_shapes[0]
        if width is None:
            width = 128 if dim >= 768 else 256
        self.kinds = ["spatial" if len(s) == 3 else "token" for s in spec.output_shapes]
        self.branches = nn.ModuleList(
            PatchBranch(s, width) if len(s) == 3 else TokenBranch(s[0], width) for s in spec.output_shapes)

    def forward(self, feats):
        return [branch(f) for branch, f in zip(self.branches, feats)]


class Head(nn.Module):
    """C_n bound to one bank entry."""

    def __init__(self, spec: FeatureExtractorSpec, head_id: str | None = None, width: int | None = None):
        super().__init__()
        self.head_id = head_id or spec.model_id
        self.kind = spec.head_kind
        self.bound_shapes = spec.output_shapes
        if self.kind == "single_scale":
            self.net = SingleScaleHead(spec.output_shapes[0], width or 256)
        else:
            self.net = MultiScaleHead(spec, width)

    @property
    def n_branches(self) -> int:
        return 1 if self.kind == "single_scale" else len(self.net.branches)

    def layer_params(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def forward(self, feats: FeatureOutput | list[torch.Tensor]) -> LogitSet:
        tensors = feats.features if isinstance(feats, FeatureOutput) else list(feats)
        if len(tensors) != len(self.bound_shapes):
            raise HeadError(f"{self.head_id}: expected {len(self.bound_shapes)} feature maps, got {len(tensors)}")
        for t, s in zip(tensors, self.bound_shapes):
            if tuple(t.shape[1:]) != s:
                raise HeadError(f"{self.head_id}: feature shape {tuple(t.shape[1:])} != bound {s}")
        if self.kind == "single_scale":
            return LogitSet([self.net(tensors[0])])
        return LogitSet(self.net(tensors))


def _init_(head: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    finals = {id(m.out) for m in head.modules() if isinstance(m, (TokenBranch, PatchBranch, SingleScaleHead))}
    gain = math.sqrt(2.0 / (1 + LRELU_SLOPE ** 2))
    for m in head.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = (1.0 if id(m) in finals else gain) / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                m.bias.zero_()


def build_head(spec: FeatureExtractorSpec, init_seed: int = 0, width: int | None = None,
               head_id: str | None = None) -> Head:
    spec.validate()
    head = Head(spec, head_id=head_id, width=width)
    _init_(head, init_seed)
    return head


def head_forward(head: Head, feats: FeatureOutput) -> LogitSet:
    return head(feats)


def parameter_count(head: nn.Module) -> int:
    return sum(p.numel() for p in head.parameters())
