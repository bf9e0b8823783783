"""Frozen toy recognition heads and the task losses that train the adapter through them."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from multirestore.errors import ConfigurationError
from multirestore.scenes import NUM_CLASSES, NUM_SEG_CLASSES

TASK_KINDS = ("pir", "classification", "segmentation")
IGNORE_INDEX = 255


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    beta: float = 1.0
    manifest: str | None = None
    head_checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task {self.task_id!r}: unknown kind {self.kind!r}")
        self.beta = float(self.beta)
        if not torch.isfinite(torch.tensor(self.beta)):
            raise ConfigurationError(f"task {self.task_id!r}: beta must be finite")


class ToyClassifier(nn.Module):
    """Small convnet with global max pooling (average pooling fails to separate the shape classes)."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.GELU(),
        )
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.fc(self.features(x).amax(dim=(2, 3)))


class ToySegmenter(nn.Module):
    """Half-resolution fully convolutional segmenter; logits upsampled to the input size."""

    def __init__(self, num_classes: int = NUM_SEG_CLASSES):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 32, 3, padding=2, dilation=2),
            nn.GELU(),
            nn.Conv2d(32, num_classes, 1),
        )

    def forward(self, x):
        return F.interpolate(self.body(x), size=x.shape[-2:], mode="bilinear", align_corners=False)


class ToyHeads(nn.Module):
    def __init__(self):
        super().__init__()
        self.classifier = ToyClassifier()
        self.segmenter = ToySegmenter()

    def freeze(self) -> "ToyHeads":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def _segmentation_ce(logits, mask):
    valid = mask != IGNORE_INDEX
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits, mask, ignore_index=IGNORE_INDEX)


def task_loss(restored: torch.Tensor, spec: TaskSpec, target, heads: ToyHeads | None = None) -> torch.Tensor:
    """PIR: MSE to the clean image; classification / segmentation: cross-entropy of the frozen head.

    ``target`` is the clean image for PIR, a (B,) long tensor of class ids for
    classification, or a (B, H, W) long mask for segmentation.
    """
    if spec.kind == "pir":
        if not torch.is_tensor(target) or target.shape != restored.shape or not torch.is_floating_point(target):
            raise ValueError("pir task expects the clean image batch as target")
        return F.mse_loss(restored, target)
    if heads is None:
        raise ValueError(f"task kind {spec.kind!r} needs the frozen heads")
    if spec.kind == "classification":
        if not torch.is_tensor(target) or target.dim() != 1 or torch.is_floating_point(target):
            raise ValueError("classification task expects a (B,) tensor of class ids")
        return F.cross_entropy(heads.classifier(restored), target)
    if not torch.is_tensor(target) or target.dim() != 3 or torch.is_floating_point(target):
        raise ValueError("segmentation task expects a (B,H,W) integer mask")
    return _segmentation_ce(heads.segmenter(restored), target)


def combined_stage2_loss(batch_losses: list[tuple[TaskSpec, torch.Tensor]]) -> torch.Tensor:
    if not batch_losses:
        raise ValueError("at least one task loss is required")
    total = None
    for spec, loss in batch_losses:
        if spec.beta < 0:
            raise ConfigurationError(f"task {spec.task_id!r}: beta must be >= 0, got {spec.beta}")
        term = spec.beta * loss
        total = term if total is None else total + term
    return total


def pretrain_heads(
    heads: ToyHeads,
    images: torch.Tensor,
    class_ids: torch.Tensor,
    masks: torch.Tensor,
    steps: int = 600,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict[str, float]:
    """Train both heads on clean images. Returns final training losses."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(heads.parameters(), lr=lr)
    heads.train()
    n = images.shape[0]
    cls_loss = seg_loss = torch.zeros(())
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        x = images[idx]
        # light photometric jitter so the heads are not brittle to small shifts
        x = (x + 0.03 * torch.randn(x.shape, generator=gen)).clamp(0, 1)
        cls_loss = F.cross_entropy(heads.classifier(x), class_ids[idx])
        seg_loss = _segmentation_ce(heads.segmenter(x), masks[idx])
        opt.zero_grad()
        (cls_loss + seg_loss).backward()
        opt.step()
    heads.freeze()
    return {"classification": cls_loss.item(), "segmentation": seg_loss.item()}
