"""Staged residual feature extractor with five pooled feature taps.

The same network class serves as student (3 input channels) and teacher
(3K input channels). Only the stem convolution depends on the channel count,
so parameter shapes downstream of the stem agree between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_STAGES = 5


@dataclass
class BackboneConfig:
    input_channels: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    embed_dim: int = 128
    input_height: int = 64
    input_width: int = 32
    num_classes: int = 1

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.validate()

    def validate(self):
        if self.input_channels <= 0 or self.input_channels % 3:
            raise ValueError(
                f"input_channels must be a positive multiple of 3, got {self.input_channels}"
            )
        if len(self.stage_channels) != 4:
            raise ValueError(
                f"stage_channels must list exactly 4 counts, got {len(self.stage_channels)}"
            )
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.input_height < 16 or self.input_width < 16:
            raise ValueError("input must be at least 16x16 for four stride-2 stages")

    @property
    def shots(self) -> int:
        return self.input_channels // 3

    def stage_dims(self) -> list[int]:
        """Feature length of each of the five taps."""
        return list(self.stage_channels) + [self.embed_dim]

    def with_shots(self, k: int) -> "BackboneConfig":
        """Same architecture with a 3k-channel stem (teacher form)."""
        return BackboneConfig(
            input_channels=3 * k,
            stage_channels=list(self.stage_channels),
            embed_dim=self.embed_dim,
            input_height=self.input_height,
            input_width=self.input_width,
            num_classes=self.num_classes,
        )


@dataclass
class StagedFeatures:
    """Batched per-stage pooled vectors.

    ``pooled[b]`` holds the tap of stage ``b + 1`` with shape (N, c_b);
    ``maps`` is only filled when raw stage maps were requested.
    """

    pooled: list[torch.Tensor]
    logits: torch.Tensor
    maps: list[torch.Tensor] | None = None

    def __len__(self):
        return self.logits.shape[0]

    @property
    def embedding(self) -> torch.Tensor:
        return self.pooled[-1]


def global_avg_pool(feature_map):
    """Spatial mean per channel.

    Accepts a single H'xW'xC' map (numpy or tensor) or a batched NCHW tensor.
    """
    if isinstance(feature_map, torch.Tensor) and feature_map.dim() == 4:
        if feature_map.shape[2] == 0 or feature_map.shape[3] == 0:
            raise ValueError("feature map has empty spatial extent")
        return feature_map.mean(dim=(2, 3))
    t = torch.as_tensor(feature_map)
    if t.dim() != 3:
        raise ValueError(f"expected an H'xW'xC' map, got shape {tuple(t.shape)}")
    if t.shape[0] == 0 or t.shape[1] == 0:
        raise ValueError("feature map has empty spatial extent")
    return t.mean(dim=(0, 1))


class ResidualStage(nn.Module):
    """Two 3x3 convs with a projected shortcut; halves the spatial size."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1, stride=2, bias=False),
            nn.BatchNorm2d(out_ch),
        )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, c[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
        )
        ins = [c[0]] + c[:3]
        self.stages = nn.ModuleList(ResidualStage(i, o) for i, o in zip(ins, c))
        self.embed = nn.Linear(c[3], config.embed_dim, bias=False)
        self.embed_bn = nn.BatchNorm1d(config.embed_dim)
        self.classifier = nn.Linear(config.embed_dim, config.num_classes, bias=False)

    def forward(self, x: torch.Tensor, return_maps: bool = False) -> StagedFeatures:
        """Forward an NCHW batch."""
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(
                f"expected N x {cfg.input_channels} x H x W input, got {tuple(x.shape)}"
            )
        if x.shape[2] != cfg.input_height or x.shape[3] != cfg.input_width:
            raise ValueError(
                f"expected spatial size {cfg.input_height}x{cfg.input_width}, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        h = self.stem(x)
        maps, pooled = [], []
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
            pooled.append(global_avg_pool(h))
        emb = self.embed_bn(self.embed(pooled[-1]))
        pooled.append(emb)
        return StagedFeatures(pooled, self.classifier(emb), maps if return_maps else None)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=gen)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.01 if m is self.classifier else 0.05, generator=gen)
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
                m.reset_running_stats()


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Construct a backbone with parameters drawn from a private generator."""
    model = Backbone(config)
    model.reset_parameters(seed)
    return model


def to_nchw(batch) -> torch.Tensor:
    """N x H x W x C (numpy or tensor) -> contiguous float NCHW tensor."""
    t = torch.as_tensor(batch)
    if t.dim() != 4:
        raise ValueError(f"expected an N x H x W x C batch, got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.float()
    return t.permute(0, 3, 1, 2).contiguous()


def forward_staged(backbone: Backbone, batch, return_maps: bool = False) -> StagedFeatures:
    """Run an N x H x W x C batch through ``backbone``.

    Uses whatever train/eval mode the backbone is in; call ``backbone.eval()``
    for deterministic inference.
    """
    x = to_nchw(batch).to(next(backbone.parameters()).dtype)
    return backbone(x, return_maps=return_maps)
