"""PSNR, SSIM, accuracy and mIoU.

All functions accept numpy arrays or torch tensors. Images are (C,H,W) or
(B,C,H,W) floats; PSNR/SSIM of a batch are per-image values averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from multirestore.errors import ShapeError

INF = float("inf")


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).detach().to(torch.float64)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise ShapeError(f"expected an image or image batch, got shape {tuple(t.shape)}")
    return t


def psnr(a, b, max_val: float = 1.0) -> float:
    """Mean per-image PSNR in dB; ``inf`` when every image pair is identical."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = ((a - b) ** 2).flatten(1).mean(1)
    values = [INF if m == 0 else 10.0 * math.log10(max_val**2 / float(m)) for m in mse]
    return float(np.mean(values))


def gaussian_window(window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(window, dtype=torch.float64) - (window - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, window: int = 11, sigma: float = 1.5, max_val: float = 1.0) -> float:
    """Gaussian-window SSIM over valid window positions, averaged over windows, channels and images."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} window")
    c = a.shape[1]
    w = gaussian_window(window, sigma).expand(c, 1, window, window).contiguous()
    c1, c2 = (0.01 * max_val) ** 2, (0.03 * max_val) ** 2

    def filt(x):
        return F.conv2d(x, w, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.flatten(1).mean(1).mean())


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)


def accuracy(logits, labels) -> float:
    """Fraction of samples whose argmax (lowest index on ties) equals the label."""
    logits, labels = _np(logits), _np(labels)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"batch sizes differ: {logits.shape[0]} vs {labels.shape[0]}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class MiouResult:
    value: float
    defined: bool
    per_class: dict[int, float]


def miou_details(pred_mask, true_mask, num_classes: int, ignore: int = 255) -> MiouResult:
    pred, true = _np(pred_mask).astype(np.int64), _np(true_mask).astype(np.int64)
    if pred.shape != true.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {true.shape}")
    for name, m in (("pred", pred), ("true", true)):
        bad = (m != ignore) & ((m < 0) | (m >= num_classes))
        if bad.any():
            raise ValueError(f"{name} mask has class ids outside [0, {num_classes}) and != {ignore}")
    keep = (pred != ignore) & (true != ignore)
    p, t = pred[keep], true[keep]
    conf = np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    per_class = {k: float(inter[k] / union[k]) for k in range(num_classes) if union[k] > 0}
    if not per_class:
        return MiouResult(float("nan"), False, {})
    return MiouResult(float(np.mean(list(per_class.values()))), True, per_class)


def miou(pred_mask, true_mask, num_classes: int, ignore: int = 255) -> float:
    """Mean IoU over classes present in either mask; NaN when every pixel is ignored."""
    return miou_details(pred_mask, true_mask, num_classes, ignore).value
