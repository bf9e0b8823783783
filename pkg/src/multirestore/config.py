"""Flat ``key = value`` config files with ``include`` support.

::

    # comment
    include base.cfg
    seed = 3
    train.steps = 2000
    task.cls.kind = classification
    task.cls.beta = 1.0

Values are parsed as Python literals when possible (numbers, booleans,
lists) and kept as strings otherwise. Later keys override earlier ones;
included files are read at the point of inclusion, relative to the
including file.
"""

from __future__ import annotations

import ast
import hashlib
import json
from pathlib import Path

from multirestore.errors import ConfigurationError
from multirestore.heads import TaskSpec


def parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path: str | Path, _seen: tuple = ()) -> dict:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigurationError(f"include cycle at {path}")
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    out: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            out.update(load_config(path.parent / line[len("include "):].strip(), _seen + (path,)))
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"{path}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(cfg[k])}\n" for k in sorted(cfg))


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def task_specs(cfg: dict) -> list[TaskSpec]:
    """Collect ``task.<id>.<field>`` keys into TaskSpecs, ordered by task id."""
    fields: dict[str, dict] = {}
    for key, value in cfg.items():
        if not key.startswith("task."):
            continue
        parts = key.split(".")
        if len(parts) != 3:
            raise ConfigurationError(f"bad task key {key!r}; expected task.<id>.<field>")
        fields.setdefault(parts[1], {})[parts[2]] = value
    specs = []
    for task_id in sorted(fields):
        f = dict(fields[task_id])
        if "kind" not in f:
            raise ConfigurationError(f"task {task_id!r} has no kind")
        known = {"kind", "beta", "manifest", "head_checkpoint"}
        extra = {k: v for k, v in f.items() if k not in known}
        specs.append(
            TaskSpec(
                task_id=task_id,
                kind=f["kind"],
                beta=f.get("beta", 1.0),
                manifest=f.get("manifest"),
                head_checkpoint=f.get("head_checkpoint"),
                extra=extra,
            )
        )
    return specs
