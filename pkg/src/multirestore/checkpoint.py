"""Checkpoint archive and parameter-group digests.

A checkpoint is a single ``torch.save`` archive holding::

    {"groups": {"encoder": state_dict, ..., "prompts.<task>": tensor,
                "heads": state_dict},
     "metadata": "<json>"}

The metadata JSON carries the model config, stage, step, seed and the task
registry.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from multirestore.backbone import ModelConfig, RestorationModel
from multirestore.errors import StateError
from multirestore.heads import ToyHeads

FORMAT = "multirestore-checkpoint/1"


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def group_state(obj) -> dict[str, torch.Tensor]:
    if isinstance(obj, nn.Module):
        return dict(obj.state_dict())
    return {"": obj.detach()}


def group_digests(model: RestorationModel, heads: ToyHeads | None = None, extra: dict | None = None) -> dict[str, str]:
    """Digest every named parameter group (plus ``heads`` and any ``extra`` modules)."""
    groups = dict(model.groups())
    if heads is not None:
        groups["heads"] = heads
    if extra:
        groups.update(extra)
    return {name: tensor_digest(group_state(obj)) for name, obj in groups.items()}


def checkpoint_digest(model: RestorationModel, heads: ToyHeads | None = None) -> str:
    d = group_digests(model, heads)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: RestorationModel,
    heads: ToyHeads | None = None,
    metadata: dict | None = None,
) -> str:
    """Write the archive; returns its content digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = {name: group_state(obj) for name, obj in model.groups().items()}
    if heads is not None:
        groups["heads"] = dict(heads.state_dict())
    meta = dict(metadata or {})
    meta["format"] = FORMAT
    meta["config"] = model.config.to_dict()
    meta["tasks"] = model.prompts.task_ids
    meta["has_heads"] = heads is not None
    meta["stages"] = list(model.trained_stages)
    meta["digest"] = checkpoint_digest(model, heads)
    torch.save({"groups": groups, "metadata": json.dumps(meta, sort_keys=True)}, path)
    return meta["digest"]


def load_checkpoint(path: str | Path, model_overrides: dict | None = None):
    """Rebuild ``(model, heads or None, metadata)`` from an archive."""
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = json.loads(blob["metadata"])
    if meta.get("format") != FORMAT:
        raise StateError(f"{path} is not a {FORMAT} archive")
    cfg = dict(meta["config"])
    cfg.update(model_overrides or {})
    model = RestorationModel(ModelConfig.from_dict(cfg))
    groups = blob["groups"]
    for task_id in meta.get("tasks", []):
        model.prompts.register(task_id)
    for name, mod in model.groups().items():
        if name not in groups:
            continue
        if name.startswith("prompts."):
            with torch.no_grad():
                mod.copy_(groups[name][""])
        else:
            mod.load_state_dict(groups[name])
    model.trained_stages = list(meta.get("stages", []))
    heads = None
    if "heads" in groups:
        heads = ToyHeads()
        heads.load_state_dict(groups["heads"])
        heads.freeze()
    return model, heads, meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stable_json(obj) -> str:
    """JSON with sorted keys and non-finite floats rendered as strings."""

    def fix(o):
        if isinstance(o, float) and not np.isfinite(o):
            return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        return o

    return json.dumps(fix(obj), sort_keys=True, indent=1)
