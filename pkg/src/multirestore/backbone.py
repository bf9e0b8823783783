"""Toy autoencoder, latent controller and the assembled restoration model.

The encoder/decoder pair stands in for a pretrained VAE; the controller plus
tuner stand in for a frozen diffusion U-Net driven through a control branch.
The controller predicts the clean latent directly from a noised latent, a
timestep and the (degraded) control latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from multirestore.cfrm import CfrmStack
from multirestore.errors import ShapeError

T_DEFAULT = 50


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    image_size: int = 64
    latent_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("encoder needs at least 2 layers")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError("image_size must be divisible by 2**layers")

    @property
    def layers(self) -> int:
        return len(self.channels)

    @property
    def latent_size(self) -> int:
        # the latent sits one level above the deepest feature map
        return self.image_size // 2 ** (self.layers - 1)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cfrm_groups: int = 4
    prompt_dim: int = 64
    gate: str = "softmax"
    controller_width: int = 64
    timesteps: int = T_DEFAULT
    use_cfrm: bool = True
    use_tfa: bool = True

    def to_dict(self) -> dict:
        return {
            "channels": list(self.encoder.channels),
            "image_size": self.encoder.image_size,
            "latent_channels": self.encoder.latent_channels,
            "cfrm_groups": self.cfrm_groups,
            "prompt_dim": self.prompt_dim,
            "gate": self.gate,
            "controller_width": self.controller_width,
            "timesteps": self.timesteps,
            "use_cfrm": self.use_cfrm,
            "use_tfa": self.use_tfa,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = EncoderConfig(
            channels=tuple(d.get("channels", (16, 32, 64))),
            image_size=int(d.get("image_size", 64)),
            latent_channels=int(d.get("latent_channels", 4)),
        )
        keys = ("cfrm_groups", "prompt_dim", "gate", "controller_width", "timesteps", "use_cfrm", "use_tfa")
        return cls(encoder=enc, **{k: d[k] for k in keys if k in d})


@dataclass
class LatentState:
    z: torch.Tensor
    t: int


class NoiseSchedule:
    """Linear-beta schedule, rescaled so ``T`` steps span the usual 1000-step range."""

    def __init__(self, timesteps: int = T_DEFAULT):
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        self.timesteps = timesteps
        scale = 1000.0 / timesteps
        betas = torch.linspace(1e-4 * scale, 0.02 * scale, timesteps, dtype=torch.float64)
        betas = betas.clamp(max=0.999)
        self.alpha_bar = torch.cumprod(1.0 - betas, dim=0)

    def __call__(self, t: int) -> float:
        t = int(t)
        if not 0 <= t < self.timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.timesteps})")
        return float(self.alpha_bar[t])

    def alpha_bars(self, t: torch.Tensor) -> torch.Tensor:
        if (t < 0).any() or (t >= self.timesteps).any():
            raise ValueError(f"timesteps outside [0, {self.timesteps})")
        return self.alpha_bar.to(torch.float32)[t]


def noise_schedule(t: int, timesteps: int = T_DEFAULT) -> float:
    return NoiseSchedule(timesteps)(t)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        blocks = []
        prev = 3
        for c in config.channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, c, 3, stride=2, padding=1),
                    nn.GELU(),
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.GELU(),
                )
            )
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.to_latent = nn.Conv2d(prev, config.latent_channels, 3, padding=1)

    def forward(self, img, cfrm: CfrmStack | None = None):
        c = self.config
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[-1] != c.image_size or img.shape[-2] != c.image_size:
            raise ShapeError(f"expected (B,3,{c.image_size},{c.image_size}), got {tuple(img.shape)}")
        feats = []
        x = img
        for i, block in enumerate(self.blocks):
            x = block(x)
            if cfrm is not None:
                x = cfrm[i](x)
            feats.append(x)
        latent = self.to_latent(F.interpolate(x, scale_factor=2, mode="nearest"))
        return feats, latent


class Decoder(nn.Module):
    """Mirror of the encoder. Decoder layer j consumes encoder feature M-1-j."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = list(config.channels)[::-1]
        self.stem = nn.Sequential(
            nn.Conv2d(config.latent_channels, ch[0], 3, stride=2, padding=1),
            nn.GELU(),
        )
        blocks = []
        for j, c in enumerate(ch):
            nxt = ch[j + 1] if j + 1 < len(ch) else ch[-1]
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.GELU(),
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c, nxt, 3, padding=1),
                    nn.GELU(),
                )
            )
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch[-1], 3, 3, padding=1)

    def forward(self, latent, enc_features=None, fusion=None, prompt=None):
        if fusion is not None and getattr(fusion, "uses_prompt", True) and prompt is None:
            raise ValueError("a task prompt is required when the TFA is present")
        m = self.config.layers
        if fusion is not None and (enc_features is None or len(enc_features) != m):
            raise ShapeError(f"fusion needs an encoder pyramid of length {m}")
        x = self.stem(latent)
        c = prompt
        for j, block in enumerate(self.blocks):
            if fusion is not None:
                x, c = fusion.layer_forward(j, enc_features[m - 1 - j], x, c)
            x = block(x)
        return torch.sigmoid(self.head(x))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ScTuner(nn.Module):
    """Channel attention over the control features, conditioned on the timestep embedding."""

    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * width, width // 2)
        self.fc2 = nn.Linear(width // 2, width)

    def forward(self, h_ctrl, temb):
        pooled = F.adaptive_avg_pool2d(h_ctrl, 1).flatten(1)
        w = torch.sigmoid(self.fc2(F.gelu(self.fc1(torch.cat([pooled, temb], dim=1)))))
        return h_ctrl * w[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.temb = nn.Linear(width, width)

    def forward(self, x, temb):
        h = F.gelu(self.conv1(x)) + self.temb(temb)[:, :, None, None]
        return x + self.conv2(F.gelu(h))


class LatentController(nn.Module):
    """Denoiser plus control branch; predicts the clean latent."""

    def __init__(self, latent_channels: int = 4, width: int = 64):
        super().__init__()
        self.width = width
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, width))
        self.z_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.ctrl_in = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.body = nn.ModuleList([ResBlock(width), ResBlock(width)])
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)

    def forward(self, z_t, t, control, tuner: ScTuner):
        temb = self.time_mlp(timestep_embedding(t, self.width))
        h = self.z_in(z_t) + tuner(self.ctrl_in(control), temb)
        for block in self.body:
            h = block(h, temb)
        return self.out(F.gelu(h))


class RestorationModel(nn.Module):
    """Encoder (+CFRM) -> controller/tuner -> decoder (+TFA), with a task prompt bank."""

    GROUPS = ("encoder", "decoder", "cfrm", "controller", "tuner", "tfa")

    def __init__(self, config: ModelConfig | None = None):
        from multirestore.tfa import PromptBank, TfaStack

        super().__init__()
        self.config = config = config or ModelConfig()
        enc = config.encoder
        self.encoder = Encoder(enc)
        self.decoder = Decoder(enc)
        self.cfrm = CfrmStack(list(enc.channels), config.cfrm_groups) if config.use_cfrm else None
        self.controller = LatentController(enc.latent_channels, config.controller_width)
        self.tuner = ScTuner(config.controller_width)
        self.tfa = (
            TfaStack(list(enc.channels)[::-1], config.prompt_dim, config.gate) if config.use_tfa else None
        )
        self.prompts = PromptBank(config.prompt_dim)
        self.schedule = NoiseSchedule(config.timesteps)
        self.trained_stages: list[str] = []

    def groups(self) -> dict[str, nn.Module]:
        """Named parameter groups (prompts split per task)."""
        out = {}
        for name in self.GROUPS:
            mod = getattr(self, name)
            if mod is not None:
                out[name] = mod
        for task_id in self.prompts.task_ids:
            out[f"prompts.{task_id}"] = self.prompts.prompts[task_id]
        return out

    def encode(self, img, cfrm: CfrmStack | None = None):
        return self.encoder(img, cfrm)

    def control_denoise(self, state: LatentState, control: torch.Tensor) -> torch.Tensor:
        if control.shape != state.z.shape:
            raise ShapeError(f"control {tuple(control.shape)} != latent {tuple(state.z.shape)}")
        t = int(state.t)
        if not 0 <= t < self.schedule.timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.schedule.timesteps})")
        tt = torch.full((state.z.shape[0],), t, dtype=torch.long)
        return self.controller(state.z, tt, control, self.tuner)

    def predict_clean_latent(self, z_t, t: torch.Tensor, control):
        return self.controller(z_t, t, control, self.tuner)

    def decode(self, latent, enc_features=None, tfa=None, prompt=None):
        return self.decoder(latent, enc_features, tfa, prompt)

    def sample_latent(self, control: torch.Tensor, steps: int = 1) -> torch.Tensor:
        """Deterministic latent restoration starting from the mean of the final noise level.

        ``steps=1`` is a single clean-latent prediction at t=T-1; more steps
        run a deterministic DDIM-style loop on an evenly spaced timestep grid.
        """
        T = self.schedule.timesteps
        if steps < 1 or steps > T:
            raise ValueError(f"steps must be in [1, {T}]")
        grid = torch.linspace(T - 1, 0, steps).round().long().tolist()
        z = torch.zeros_like(control)
        z0 = z
        for k, t in enumerate(grid):
            z0 = self.control_denoise(LatentState(z, t), control)
            if k + 1 < len(grid):
                ab, ab_next = self.schedule(t), self.schedule(grid[k + 1])
                eps = (z - math.sqrt(ab) * z0) / math.sqrt(1.0 - ab)
                z = math.sqrt(ab_next) * z0 + math.sqrt(1.0 - ab_next) * eps
        return z0

    def restore(self, img, task_id: str | None = None, steps: int = 1, fusion=None, prompt=None):
        """Full pipeline. Uses the shared TFA with ``task_id``'s prompt unless overridden."""
        feats, control = self.encode(img, self.cfrm)
        z0 = self.sample_latent(control, steps)
        if fusion is None and self.tfa is not None and task_id is not None:
            fusion = self.tfa
            prompt = self.prompts.get(task_id)
        return self.decode(z0, feats, fusion, prompt if fusion is not None else None)
