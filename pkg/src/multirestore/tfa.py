"""Task feature adapter: prompt-driven gated fusion of encoder features into the decoder.

At decoder layer ``i`` a cell state ``C`` (one vector of size ``D`` per
sample) is updated from the restored encoder features with LSTM-style gates:

    f = gate(proj_f(F_enc))
    i = gate(proj_i(F_enc))
    C' = f * C + i * tanh(proj_c(F_enc))
    o = tanh(xi(C'))
    F_enc' = psi(F_enc, o) + F_enc
    F_latent' = omega(cat(F_enc', F_latent)) + F_latent

``gate`` is softmax over the D entries by default (sigmoid is available as a
switch). The cell state starts from the task's learnable prompt and is
threaded through the layers.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from multirestore.errors import RegistryError, ShapeError

GATES = ("softmax", "sigmoid")


class PromptProjection(nn.Module):
    """Instance norm -> conv -> GELU -> global average pool, producing a D-vector."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.conv = nn.Conv2d(channels, dim, 3, padding=1)

    def forward(self, x):
        return F.adaptive_avg_pool2d(F.gelu(self.conv(self.norm(x))), 1).flatten(1)


class TfaLayer(nn.Module):
    def __init__(self, channels: int, dim: int = 64, gate: str = "softmax"):
        super().__init__()
        if gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}, got {gate!r}")
        self.channels = channels
        self.dim = dim
        self.gate = gate
        self.theta_f = PromptProjection(channels, dim)
        self.theta_i = PromptProjection(channels, dim)
        self.theta_c = PromptProjection(channels, dim)
        self.xi = nn.Linear(dim, dim)
        # psi: channel attention on F_enc conditioned on o, zero-init projection
        self.psi = nn.Linear(dim, channels)
        # omega: 1x1 conv over cat(F_enc', F_latent); zero-init => omega == 0
        self.omega = nn.Conv2d(2 * channels, channels, 1)
        for m in (self.psi, self.omega):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def _gate(self, x):
        if self.gate == "softmax":
            return torch.softmax(x, dim=-1)
        return torch.sigmoid(x)

    def gates(self, f_enc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Forget and input gates for ``f_enc``, each (B, D)."""
        return self._gate(self.theta_f(f_enc)), self._gate(self.theta_i(f_enc))

    def forward(self, f_enc, f_latent, c):
        if f_enc.shape[-2:] != f_latent.shape[-2:]:
            raise ShapeError(
                f"encoder and decoder features not spatially aligned: "
                f"{tuple(f_enc.shape)} vs {tuple(f_latent.shape)}"
            )
        if f_enc.shape[1] != self.channels or f_latent.shape[1] != self.channels:
            raise ShapeError(f"TFA layer expects {self.channels} channels")
        if c.shape[-1] != self.dim:
            raise ValueError(f"prompt dimension {c.shape[-1]} != {self.dim}")
        if c.dim() == 1:
            c = c.expand(f_enc.shape[0], -1)

        f_gate, i_gate = self.gates(f_enc)
        c_next = f_gate * c + i_gate * torch.tanh(self.theta_c(f_enc))
        o = torch.tanh(self.xi(c_next))
        attn = torch.sigmoid(self.psi(o))[:, :, None, None]
        f_enc_k = f_enc * attn + f_enc
        fused = self.omega(torch.cat([f_enc_k, f_latent], dim=1))
        return fused + f_latent, c_next


def tfa_forward(f_enc, f_latent, c, layer: TfaLayer):
    return layer(f_enc, f_latent, c)


class TfaStack(nn.Module):
    """One TFA layer per decoder layer; ``channels`` is in decoder order."""

    uses_prompt = True

    def __init__(self, channels: list[int], dim: int = 64, gate: str = "softmax"):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(TfaLayer(c, dim, gate) for c in channels)

    def __len__(self):
        return len(self.layers)

    def layer_forward(self, j, f_enc, f_latent, c):
        return self.layers[j](f_enc, f_latent, c)


class AdapterLayer(nn.Module):
    """Prompt-free fusion block: conv over (F_enc, F_latent), zero-init output, residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse_in = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.fuse_mid = nn.Conv2d(channels, channels, 3, padding=1)
        self.fuse_out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.fuse_out.weight)
        nn.init.zeros_(self.fuse_out.bias)

    def forward(self, f_enc, f_latent):
        h = F.gelu(self.fuse_in(torch.cat([f_enc, f_latent], dim=1)))
        return self.fuse_out(F.gelu(self.fuse_mid(h))) + f_latent


class AdapterStack(nn.Module):
    uses_prompt = False

    def __init__(self, channels: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(AdapterLayer(c) for c in channels)

    def __len__(self):
        return len(self.layers)

    def layer_forward(self, j, f_enc, f_latent, c):
        return self.layers[j](f_enc, f_latent), c


def tfa_stack_forward(stack, pyramid, decoder_features, prompt):
    """Fuse mirror-paired encoder features into ``decoder_features`` layer by layer.

    ``decoder_features[j]`` is fused with ``pyramid[M-1-j]``. This helper
    treats the decoder features as given (no decoder blocks in between);
    returns the fused features and the final cell state.
    """
    m = len(pyramid)
    if len(decoder_features) != m or len(stack) != m:
        raise ShapeError(f"pyramid, decoder features and stack must all have length {m}")
    c = prompt
    fused = []
    for j in range(m):
        out, c = stack.layer_forward(j, pyramid[m - 1 - j], decoder_features[j], c)
        fused.append(out)
    return fused, c


class PromptBank(nn.Module):
    """Registry of per-task learnable prompt vectors."""

    def __init__(self, dim: int = 64, init_std: float = 0.02):
        super().__init__()
        self.dim = dim
        self.init_std = init_std
        self.prompts = nn.ParameterDict()

    def register(self, task_id: str, generator: torch.Generator | None = None) -> nn.Parameter:
        if task_id in self.prompts:
            raise RegistryError(f"task {task_id!r} is already registered")
        if not task_id or "." in task_id:
            raise ValueError(f"invalid task id {task_id!r}")
        value = torch.randn(self.dim, generator=generator) * self.init_std
        self.prompts[task_id] = nn.Parameter(value)
        return self.prompts[task_id]

    def get(self, task_id: str) -> nn.Parameter:
        if task_id not in self.prompts:
            raise KeyError(f"task {task_id!r} is not registered")
        return self.prompts[task_id]

    def __contains__(self, task_id) -> bool:
        return task_id in self.prompts

    @property
    def task_ids(self) -> list[str]:
        return list(self.prompts.keys())


VARIANTS = (
    "multi_adapter",
    "multi_tfa",
    "shared_tfa_single_prompt",
    "shared_tfa_per_task_prompt",
)
SHARED_PROMPT_ID = "shared"


class FusionPlan:
    """Stage-2 tunable modules for one adapter variant.

    * ``multi_adapter``: one prompt-free adapter stack per task
    * ``multi_tfa``: one TFA stack and one prompt per task
    * ``shared_tfa_single_prompt``: one TFA, one prompt used by every task
    * ``shared_tfa_per_task_prompt``: one TFA, one prompt per task
    """

    def __init__(self, variant: str, task_ids: list[str], channels: list[int], dim: int = 64, gate: str = "softmax"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if not task_ids:
            raise ValueError("at least one task is required")
        self.variant = variant
        self.task_ids = list(task_ids)
        self.dim = dim
        self._fusions: dict[str, nn.Module] = {}
        self._prompts = PromptBank(dim)
        if variant == "multi_adapter":
            for t in task_ids:
                self._fusions[t] = AdapterStack(channels)
        elif variant == "multi_tfa":
            for t in task_ids:
                self._fusions[t] = TfaStack(channels, dim, gate)
                self._prompts.register(t)
        else:
            shared = TfaStack(channels, dim, gate)
            for t in task_ids:
                self._fusions[t] = shared
            if variant == "shared_tfa_single_prompt":
                self._prompts.register(SHARED_PROMPT_ID)
            else:
                for t in task_ids:
                    self._prompts.register(t)

    def fusion(self, task_id: str) -> nn.Module:
        if task_id not in self._fusions:
            raise KeyError(f"task {task_id!r} is not registered")
        return self._fusions[task_id]

    def prompt(self, task_id: str):
        if self.variant == "multi_adapter":
            return None
        if self.variant == "shared_tfa_single_prompt":
            return self._prompts.get(SHARED_PROMPT_ID)
        return self._prompts.get(task_id)

    def modules(self) -> dict:
        """The tunable set, keyed by group name."""
        out = {}
        if self.variant in ("multi_adapter", "multi_tfa"):
            prefix = "adapter" if self.variant == "multi_adapter" else "tfa"
            for t, m in self._fusions.items():
                out[f"{prefix}.{t}"] = m
        else:
            out["tfa"] = self._fusions[self.task_ids[0]]
        for t in self._prompts.task_ids:
            out[f"prompts.{t}"] = self._prompts.get(t)
        return out

    def tuned_parameter_count(self) -> int:
        total = 0
        for obj in self.modules().values():
            total += obj.numel() if isinstance(obj, nn.Parameter) else sum(p.numel() for p in obj.parameters())
        return total


def build_variant(variant, task_ids, channels, dim=64, gate="softmax") -> FusionPlan:
    return FusionPlan(variant, task_ids, channels, dim, gate)


def audit_tuned_params(
    variant: str,
    num_tasks: int,
    channels: tuple[int, ...] = (64, 32, 16),
    dim: int = 64,
) -> int:
    """Exact stage-2 trainable parameter count of ``variant`` for ``num_tasks`` tasks.

    ``channels`` are the decoder-order channel counts of the fused layers.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    plan = FusionPlan(variant, [f"task{k}" for k in range(num_tasks)], list(channels), dim)
    return plan.tuned_parameter_count()
