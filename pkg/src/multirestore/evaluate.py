"""Evaluation harness: restored-output and degraded-input ("LQ") metrics per task and per degradation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import torch

from multirestore.backbone import RestorationModel
from multirestore.data import TaskData
from multirestore.errors import ConfigurationError
from multirestore.heads import TaskSpec, ToyHeads
from multirestore.metrics import accuracy, miou_details, psnr, ssim
from multirestore.scenes import NUM_SEG_CLASSES


def restore_batches(
    model: RestorationModel,
    images: torch.Tensor,
    task_id: str | None,
    plan=None,
    sample_steps: int = 1,
    batch_size: int = 32,
    workers: int = 1,
) -> torch.Tensor:
    """Run the full pipeline over ``images``; output order matches input order."""
    fusion = prompt = None
    if plan is not None and task_id is not None:
        fusion, prompt = plan.fusion(task_id), plan.prompt(task_id)

    def run(chunk):
        with torch.no_grad():
            if fusion is not None:
                return model.restore(chunk, steps=sample_steps, fusion=fusion, prompt=prompt)
            tid = task_id if (model.tfa is not None and task_id in model.prompts) else None
            return model.restore(chunk, tid, steps=sample_steps)

    chunks = list(torch.split(images, batch_size))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return torch.cat(outs) if outs else images[:0]


def _task_metrics(spec: TaskSpec, images, data: TaskData, heads: ToyHeads | None) -> dict:
    if spec.kind == "pir":
        return {"psnr": psnr(images, data.clean), "ssim": ssim(images, data.clean)}
    if heads is None:
        raise ConfigurationError(f"task {spec.task_id!r} ({spec.kind}) needs recognition heads in the checkpoint")
    with torch.no_grad():
        if spec.kind == "classification":
            if data.class_ids is None:
                raise ConfigurationError(f"task {spec.task_id!r}: eval data has no class labels")
            return {"accuracy": accuracy(heads.classifier(images), data.class_ids)}
        if data.masks is None:
            raise ConfigurationError(f"task {spec.task_id!r}: eval data has no masks")
        pred = heads.segmenter(images).argmax(1)
    res = miou_details(pred, data.masks, NUM_SEG_CLASSES)
    return {"miou": res.value if res.defined else None, "miou_defined": res.defined}


def evaluate(
    model: RestorationModel,
    heads: ToyHeads | None,
    tasks: list[tuple[TaskSpec, TaskData]],
    plan=None,
    sample_steps: int = 1,
    workers: int = 1,
    batch_size: int = 32,
) -> dict:
    """Metric tables for every task: overall and per degradation, restored vs LQ."""
    report = {}
    for spec, data in tasks:
        restored = restore_batches(model, data.degraded, spec.task_id, plan, sample_steps, batch_size, workers)
        entry = {
            "kind": spec.kind,
            "count": len(data),
            "restored": _task_metrics(spec, restored, data, heads),
            "lq": _task_metrics(spec, data.degraded, data, heads),
            "per_degradation": {},
        }
        for kind in sorted(set(data.kinds)):
            idx = [i for i, k in enumerate(data.kinds) if k == kind]
            sub = data.subset(idx)
            entry["per_degradation"][kind] = {
                "restored": _task_metrics(spec, restored[idx], sub, heads),
                "lq": _task_metrics(spec, sub.degraded, sub, heads),
            }
        report[spec.task_id] = entry
    return report
