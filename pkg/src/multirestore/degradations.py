"""Parameterized image corruptions with ImageNet-C style severity schedules.

Six corruption kinds are implemented. Each has a fixed table of five
parameters, one per severity level; severity 0 is accepted as the identity
("clean") level. Corruptions are computed in float and clamped to [0, 1]
afterwards, so the raw (pre-clamp) field can be inspected with
``clamp=False``.

=================  ===================================  ==============================
kind               parameter                            severities 1..5
=================  ===================================  ==============================
gaussian_noise     additive noise std                   0.08 0.12 0.18 0.26 0.38
impulse_noise      salt-and-pepper fraction             0.03 0.06 0.09 0.17 0.27
gaussian_blur      kernel sigma (px)                    1 2 3 4 6
fog                (extinction, airlight)               (.4,.75) (.7,.8) (1,.85) (1.4,.9) (1.9,.9)
brightness         additive offset                      0.1 0.2 0.3 0.4 0.5
contrast           contrast factor around image mean    0.4 0.3 0.2 0.1 0.05
=================  ===================================  ==============================
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from multirestore.errors import ShapeError

KINDS = (
    "gaussian_noise",
    "impulse_noise",
    "gaussian_blur",
    "fog",
    "brightness",
    "contrast",
)

SEVERITY_SCHEDULES: dict[str, tuple] = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),
    "gaussian_blur": (1.0, 2.0, 3.0, 4.0, 6.0),
    "fog": ((0.4, 0.75), (0.7, 0.8), (1.0, 0.85), (1.4, 0.9), (1.9, 0.9)),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),
}


@dataclass(frozen=True)
class DegradationKind:
    name: str
    severity: int

    def __post_init__(self):
        if self.name not in SEVERITY_SCHEDULES:
            raise ValueError(f"unknown degradation kind {self.name!r}; expected one of {KINDS}")
        if isinstance(self.severity, bool) or not isinstance(self.severity, int):
            raise ValueError(f"severity must be an integer, got {self.severity!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5 (or 0 for identity), got {self.severity}")

    @property
    def parameter(self):
        """Schedule entry for this severity (``None`` at severity 0)."""
        if self.severity == 0:
            return None
        return SEVERITY_SCHEDULES[self.name][self.severity - 1]

    @classmethod
    def parse(cls, text: str) -> "DegradationKind":
        """Parse ``"name:severity"`` (e.g. ``"fog:3"``)."""
        name, _, sev = text.partition(":")
        if not sev:
            raise ValueError(f"expected 'kind:severity', got {text!r}")
        return cls(name.strip(), int(sev))

    def __str__(self) -> str:
        return f"{self.name}:{self.severity}"


def _gaussian_kernel1d(sigma: float, dtype) -> torch.Tensor:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding on a (B, C, H, W) tensor."""
    k = _gaussian_kernel1d(sigma, img.dtype)
    r = (k.numel() - 1) // 2
    c = img.shape[1]
    kh = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    kv = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    out = F.conv2d(F.pad(img, (r, r, 0, 0), mode="replicate"), kh, groups=c)
    out = F.conv2d(F.pad(out, (0, 0, r, r), mode="replicate"), kv, groups=c)
    return out


def _haze_field(shape, gen: torch.Generator, dtype) -> torch.Tensor:
    b, _, h, w = shape
    coarse = torch.rand((b, 1, 4, 4), generator=gen, dtype=dtype)
    field = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=False)
    # vertical gradient: haze thickens toward the top of the frame
    ramp = torch.linspace(1.0, 0.0, h, dtype=dtype).view(1, 1, h, 1)
    return (0.5 * field + 0.5 * ramp).clamp(0.0, 1.0)


def apply_degradation(
    img: torch.Tensor, kind: DegradationKind, rng_seed: int, clamp: bool = True
) -> torch.Tensor:
    """Corrupt ``img`` with ``kind`` deterministically from ``rng_seed``.

    Accepts a single (3, H, W) image or a (B, 3, H, W) batch with values in
    [0, 1]; returns a new tensor of the same shape. With ``clamp=False`` the
    raw corrupted values are returned (only useful for inspecting the noise
    field).
    """
    if not isinstance(kind, DegradationKind):
        raise ValueError(f"kind must be a DegradationKind, got {type(kind).__name__}")
    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected RGB image (3,H,W) or (B,3,H,W), got {tuple(img.shape)}")
    if not torch.is_floating_point(x):
        raise ValueError("image must be a floating point tensor in [0, 1]")
    if x.numel() and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")

    p = kind.parameter
    gen = torch.Generator().manual_seed(int(rng_seed))
    name = kind.name
    if p is None:
        out = x.clone()
    elif name == "gaussian_noise":
        out = x + p * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    elif name == "impulse_noise":
        u = torch.rand(x.shape, generator=gen, dtype=x.dtype)
        salt = torch.rand(x.shape, generator=gen, dtype=x.dtype) < 0.5
        hit = u < p
        out = torch.where(hit & salt, torch.ones_like(x), x)
        out = torch.where(hit & ~salt, torch.zeros_like(x), out)
    elif name == "gaussian_blur":
        out = gaussian_blur(x, p)
    elif name == "fog":
        extinction, airlight = p
        depth = _haze_field(x.shape, gen, x.dtype)
        transmission = torch.exp(-extinction * (0.5 + depth))
        out = x * transmission + airlight * (1.0 - transmission)
    elif name == "brightness":
        out = x + p
    elif name == "contrast":
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        out = (x - mean) * p + mean
    else:  # pragma: no cover - guarded by DegradationKind
        raise ValueError(name)

    if clamp:
        out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if single else out


def quantize8(img: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid, matching what a PNG round trip produces."""
    return torch.round(img.clamp(0.0, 1.0) * 255.0) / 255.0
