"""Autoencoder pre-training, the two training stages and prompt-only task addition.

Each stage unfreezes an exact set of parameter groups:

* ``pretrain``: encoder, decoder
* ``stage1``:   cfrm, controller, tuner
* ``stage2``:   tfa (or the variant's fusion modules) and the task prompts
* ``add_task``: the new task's prompt only

Everything else has ``requires_grad`` switched off, so frozen groups never
receive a gradient tensor at all.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from multirestore.backbone import RestorationModel
from multirestore.cfrm import cfrm_feature_loss
from multirestore.checkpoint import group_digests
from multirestore.data import TaskData
from multirestore.errors import ConfigurationError, RegistryError, StateError
from multirestore.heads import TaskSpec, ToyHeads, task_loss
from multirestore.tfa import build_variant

STAGES = ("pretrain", "stage1", "stage2", "add_task")
DEFAULT_LR = {"pretrain": 2e-3, "stage1": 1e-3, "stage2": 1e-4, "add_task": 1e-3}

LogFn = Callable[[dict], None]


@dataclass
class TrainConfig:
    stage: str = "stage1"
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float | None = None
    seed: int = 0
    lambdas: list[float] | None = None
    betas: dict[str, float] = field(default_factory=dict)
    task_specs: list[TaskSpec] = field(default_factory=list)
    sample_steps: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.stage]


@dataclass
class TrainResult:
    stage: str
    losses: list[float]
    start_step: int
    end_step: int
    digests_before: dict[str, str]
    digests_after: dict[str, str]
    task_counts: dict[str, int] = field(default_factory=dict)

    def changed_groups(self) -> set[str]:
        before, after = self.digests_before, self.digests_after
        return {k for k in set(before) | set(after) if before.get(k) != after.get(k)}


def freeze_all(*modules) -> None:
    for m in modules:
        if m is None:
            continue
        for p in [m] if isinstance(m, nn.Parameter) else m.parameters():
            p.requires_grad_(False)
            p.grad = None


def _trainable(objs) -> list[nn.Parameter]:
    params = []
    for o in objs:
        if isinstance(o, nn.Parameter):
            o.requires_grad_(True)
            params.append(o)
        elif o is not None:
            for p in o.parameters():
                p.requires_grad_(True)
                params.append(p)
    return params


def _check_frozen_grads(modules) -> None:
    for m in modules:
        if m is None:
            continue
        for name, p in m.named_parameters():
            if p.grad is not None:
                raise AssertionError(f"frozen parameter {name} received a gradient")


def _logger(log: LogFn | None, stage: str):
    t0 = time.perf_counter()

    def emit(step, loss, task_id=None):
        if log is not None:
            log(
                {
                    "step": step,
                    "stage": stage,
                    "task_id": task_id,
                    "loss": loss,
                    "wall_time": round(time.perf_counter() - t0, 4),
                }
            )

    return emit


def pretrain_autoencoder(
    model: RestorationModel,
    images: torch.Tensor,
    config: TrainConfig,
    log: LogFn | None = None,
) -> TrainResult:
    """Plain reconstruction MSE on clean images (stand-in for a pretrained VAE)."""
    if images.shape[0] == 0:
        raise ConfigurationError("no clean images for autoencoder pre-training")
    before = group_digests(model)
    freeze_all(model)
    params = _trainable([model.encoder, model.decoder])
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    emit = _logger(log, "pretrain")
    losses = []
    n = images.shape[0]
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    for step in range(config.steps):
        x = images[torch.randint(0, n, (config.batch_size,), generator=gen)]
        _, z = model.encode(x)
        loss = F.mse_loss(model.decode(z), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        emit(step, losses[-1])
    freeze_all(model)
    model.trained_stages = ["pretrain"]
    return TrainResult("pretrain", losses, 0, config.steps, before, group_digests(model))


def stage1_loss(model: RestorationModel, degraded, clean, gen: torch.Generator, lambdas=None):
    """L_CFRM + L_Control for one batch. Returns (total, cfrm_part, control_part)."""
    with torch.no_grad():
        clear_feats, z0 = model.encode(clean)
    restored_feats, control = model.encode(degraded, model.cfrm)
    if model.cfrm is not None:
        l_cfrm = cfrm_feature_loss(restored_feats, clear_feats, lambdas)
    else:
        l_cfrm = torch.zeros(())
    b = clean.shape[0]
    t = torch.randint(0, model.schedule.timesteps, (b,), generator=gen)
    ab = model.schedule.alpha_bars(t)[:, None, None, None]
    noise = torch.randn(z0.shape, generator=gen)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
    z0_hat = model.predict_clean_latent(z_t, t, control)
    l_control = ((z0 - z0_hat) ** 2).flatten(1).sum(1).mean()
    return l_cfrm + l_control, l_cfrm, l_control


def run_stage1(
    model: RestorationModel,
    data: TaskData,
    config: TrainConfig,
    log: LogFn | None = None,
    heads: ToyHeads | None = None,
    start_step: int = 0,
) -> TrainResult:
    if data is None or len(data) == 0:
        raise ConfigurationError("stage 1 needs a PIR dataset")
    stages = getattr(model, "trained_stages", [])
    if "pretrain" not in stages:
        raise StateError("stage 1 needs a pre-trained autoencoder checkpoint")
    before = group_digests(model, heads)
    freeze_all(model, heads)
    params = _trainable([model.cfrm, model.controller, model.tuner])
    frozen = [model.encoder, model.decoder, model.tfa, model.prompts, heads]
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed + start_step)
    emit = _logger(log, "stage1")
    losses = []
    n = len(data)
    for step in range(start_step, start_step + config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        loss, _, _ = stage1_loss(model, data.degraded[idx], data.clean[idx], gen, config.lambdas)
        opt.zero_grad()
        loss.backward()
        _check_frozen_grads(frozen)
        opt.step()
        losses.append(loss.item())
        emit(step, losses[-1])
    freeze_all(model)
    if "stage1" not in stages:
        model.trained_stages = stages + ["stage1"]
    return TrainResult(
        "stage1", losses, start_step, start_step + config.steps, before, group_digests(model, heads)
    )


def _targets(spec: TaskSpec, data: TaskData, idx):
    if spec.kind == "pir":
        return data.clean[idx]
    if spec.kind == "classification":
        if data.class_ids is None:
            raise ConfigurationError(f"task {spec.task_id!r} has no class labels")
        return data.class_ids[idx]
    if data.masks is None:
        raise ConfigurationError(f"task {spec.task_id!r} has no segmentation masks")
    return data.masks[idx]


def round_robin(task_ids: list[str], steps: int, start_step: int = 0) -> list[str]:
    return [task_ids[s % len(task_ids)] for s in range(start_step, start_step + steps)]


def _fusion_for(model, task_id, plan):
    if plan is None:
        return model.tfa, model.prompts.get(task_id)
    return plan.fusion(task_id), plan.prompt(task_id)


def _stage2_forward(model, x, fusion, prompt, sample_steps):
    with torch.no_grad():
        feats, control = model.encode(x, model.cfrm)
        z0 = model.sample_latent(control, sample_steps)
    return model.decode(z0, feats, fusion, prompt)


def _train_tasks(model, heads, tasks, config, params, frozen, plan, stage, log, start_step):
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed + start_step)
    emit = _logger(log, stage)
    task_ids = [spec.task_id for spec, _ in tasks]
    by_id = {spec.task_id: (spec, data) for spec, data in tasks}
    losses, counts = [], {t: 0 for t in task_ids}
    for step, task_id in zip(
        range(start_step, start_step + config.steps), round_robin(task_ids, config.steps, start_step)
    ):
        spec, data = by_id[task_id]
        beta = config.betas.get(task_id, spec.beta)
        if beta < 0:
            raise ConfigurationError(f"task {task_id!r}: beta must be >= 0")
        idx = torch.randint(0, len(data), (config.batch_size,), generator=gen)
        fusion, prompt = _fusion_for(model, task_id, plan)
        out = _stage2_forward(model, data.degraded[idx], fusion, prompt, config.sample_steps)
        loss = beta * task_loss(out, spec, _targets(spec, data, idx), heads)
        opt.zero_grad()
        loss.backward()
        _check_frozen_grads(frozen)
        opt.step()
        counts[task_id] += 1
        losses.append(loss.item())
        emit(step, losses[-1], task_id)
    return losses, counts


def run_stage2(
    model: RestorationModel,
    heads: ToyHeads,
    tasks: list[tuple[TaskSpec, TaskData]],
    config: TrainConfig,
    log: LogFn | None = None,
    plan=None,
    start_step: int = 0,
) -> TrainResult:
    """Round-robin multi-task training of the fusion modules and task prompts.

    ``plan`` selects a fusion variant (see :func:`multirestore.tfa.build_variant`);
    by default the model's shared TFA with one prompt per task is trained.
    """
    if "stage1" not in getattr(model, "trained_stages", []):
        raise StateError("stage 2 needs a stage-1 checkpoint")
    if not tasks:
        raise ConfigurationError("stage 2 needs at least one task")
    if plan is None and model.tfa is None:
        raise ConfigurationError("model has no TFA to train")
    if plan is None:
        for spec, _ in tasks:
            if spec.task_id not in model.prompts:
                model.prompts.register(spec.task_id, torch.Generator().manual_seed(config.seed + len(model.prompts.task_ids)))
    extra = plan.modules() if plan is not None else None
    before = group_digests(model, heads, extra)
    freeze_all(model, heads)
    if plan is None:
        tunable = [model.tfa] + [model.prompts.get(spec.task_id) for spec, _ in tasks]
    else:
        freeze_all(*plan.modules().values())
        tunable = list(plan.modules().values())
    params = _trainable(tunable)
    frozen = [model.encoder, model.decoder, model.cfrm, model.controller, model.tuner, heads]
    losses, counts = _train_tasks(model, heads, tasks, config, params, frozen, plan, "stage2", log, start_step)
    freeze_all(model, heads)
    if plan is not None:
        freeze_all(*plan.modules().values())
    if "stage2" not in model.trained_stages:
        model.trained_stages = model.trained_stages + ["stage2"]
    return TrainResult(
        "stage2",
        losses,
        start_step,
        start_step + config.steps,
        before,
        group_digests(model, heads, extra),
        counts,
    )


def add_task(
    model: RestorationModel,
    heads: ToyHeads,
    new_spec: TaskSpec,
    data: TaskData,
    config: TrainConfig,
    log: LogFn | None = None,
) -> TrainResult:
    """Register a fresh prompt for ``new_spec`` and train only that prompt."""
    if "stage2" not in getattr(model, "trained_stages", []):
        raise StateError("add_task needs a completed stage-2 checkpoint")
    if new_spec.task_id in model.prompts:
        raise RegistryError(f"task {new_spec.task_id!r} is already registered")
    before = group_digests(model, heads)
    model.prompts.register(new_spec.task_id, torch.Generator().manual_seed(config.seed))
    before[f"prompts.{new_spec.task_id}"] = None
    freeze_all(model, heads)
    params = _trainable([model.prompts.get(new_spec.task_id)])
    others = [p for k, p in model.prompts.prompts.items() if k != new_spec.task_id]
    frozen = [model.encoder, model.decoder, model.cfrm, model.controller, model.tuner, model.tfa, heads]
    losses, counts = _train_tasks(
        model, heads, [(new_spec, data)], config, params, frozen, None, "add_task", log, 0
    )
    for p in others:
        if p.grad is not None:
            raise AssertionError("existing prompt received a gradient during add_task")
    freeze_all(model, heads)
    if "add_task" not in model.trained_stages:
        model.trained_stages = model.trained_stages + ["add_task"]
    return TrainResult("add_task", losses, 0, config.steps, before, group_digests(model, heads), counts)


__all__ = [
    "TrainConfig",
    "TrainResult",
    "add_task",
    "build_variant",
    "pretrain_autoencoder",
    "round_robin",
    "run_stage1",
    "run_stage2",
    "stage1_loss",
]
