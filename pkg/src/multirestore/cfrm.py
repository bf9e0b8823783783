"""Complementary feature restoration: grouped channel attention over expanded features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from multirestore.errors import ShapeError


@dataclass(frozen=True)
class CfrmConfig:
    in_channels: int
    groups: int = 4

    def __post_init__(self):
        if self.in_channels <= 0 or self.groups <= 0:
            raise ValueError("in_channels and groups must be positive")
        if (4 * self.in_channels) % self.groups:
            raise ValueError(
                f"4*in_channels ({4 * self.in_channels}) must be divisible by groups ({self.groups})"
            )

    @property
    def expanded(self) -> int:
        return 4 * self.in_channels

    @property
    def group_channels(self) -> int:
        return 4 * self.in_channels // self.groups


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of a (B, C, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class SimpleGate(nn.Module):
    def forward(self, x):
        a, b = x.chunk(2, dim=1)
        return a * b


class NAFBlock(nn.Module):
    """Simplified NAF-style block: norm, conv, simple gate, channel attention, conv, residual.

    The output conv is zero-initialized so the block starts as the identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, 2 * channels, 1)
        self.dw = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1, groups=2 * channels)
        self.gate = SimpleGate()
        self.sca = nn.Conv2d(channels, channels, 1)
        self.project = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x):
        y = self.gate(self.dw(self.expand(self.norm(x))))
        y = y * self.sca(F.adaptive_avg_pool2d(y, 1))
        return x + self.project(y)


class CfrmBlock(nn.Module):
    """Restores one encoder layer's features.

    enhance -> expand to 4C' -> l groups of C'' -> intra-group attention ->
    inter-group weighting -> recovery conv -> add the enhanced features.
    """

    def __init__(self, config: CfrmConfig):
        super().__init__()
        self.config = config
        c, e, l = config.in_channels, config.expanded, config.groups
        self.enhance = NAFBlock(c)
        self.expand = nn.Conv2d(c, e, 3, padding=1)
        self.norm = nn.GroupNorm(l, e)
        self.intra1 = nn.Conv2d(e, e, 3, padding=1, groups=l)
        self.intra2 = nn.Conv2d(e, e, 1, groups=l)
        self.inter = nn.Conv2d(e, l, 1)
        self.recover = nn.Conv2d(e, c, 3, padding=1)
        nn.init.zeros_(self.recover.weight)
        nn.init.zeros_(self.recover.bias)

    def expanded_features(self, enhanced: torch.Tensor) -> torch.Tensor:
        return self.norm(self.expand(enhanced))

    def intra_group_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Per-group channel weights, shape (B, l, C'', 1, 1), from expanded features ``x``."""
        w = self.intra2(F.adaptive_avg_pool2d(F.gelu(self.intra1(x)), 1))
        b = x.shape[0]
        return torch.sigmoid(w).view(b, self.config.groups, self.config.group_channels, 1, 1)

    def inter_group_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Group weights, shape (B, l, 1, 1, 1)."""
        w = torch.sigmoid(self.inter(F.adaptive_avg_pool2d(x, 1)))
        return w.view(x.shape[0], self.config.groups, 1, 1, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 4 or f.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"CFRM block expects (B,{self.config.in_channels},H,W), got {tuple(f.shape)}"
            )
        enhanced = self.enhance(f)
        x = self.expanded_features(enhanced)
        b, _, h, w = x.shape
        groups = x.view(b, self.config.groups, self.config.group_channels, h, w)
        groups = groups * self.intra_group_weights(x)
        groups = groups * self.inter_group_weights(groups.view(b, -1, h, w))
        merged = self.recover(groups.view(b, -1, h, w))
        return enhanced + merged


def cfrm_forward(f: torch.Tensor, block: CfrmBlock) -> torch.Tensor:
    return block(f)


class CfrmStack(nn.Module):
    """One CFRM block per encoder layer."""

    def __init__(self, channels: list[int], groups: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(CfrmBlock(CfrmConfig(c, groups)) for c in channels)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i) -> CfrmBlock:
        return self.blocks[i]


def cfrm_feature_loss(
    restored: list[torch.Tensor], clear: list[torch.Tensor], lambdas: list[float] | None = None
) -> torch.Tensor:
    """Weighted sum over layers of the mean absolute feature difference."""
    if len(restored) != len(clear):
        raise ShapeError(f"pyramid lengths differ: {len(restored)} vs {len(clear)}")
    if lambdas is None:
        lambdas = [1.0] * len(clear)
    if len(lambdas) != len(clear):
        raise ValueError(f"expected {len(clear)} lambdas, got {len(lambdas)}")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be non-negative")
    total = restored[0].new_zeros(())
    for lam, r, c in zip(lambdas, restored, clear):
        if r.shape != c.shape:
            raise ShapeError(f"feature shapes differ: {tuple(r.shape)} vs {tuple(c.shape)}")
        total = total + lam * (c - r).abs().mean()
    return total
