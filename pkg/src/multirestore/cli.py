"""Command-line entry point: ``multirestore <command> --config run.cfg --out DIR``.

Every command writes into its ``--out`` directory:

* ``config.resolved``: the fully resolved key/value config
* ``log.jsonl``: one record per training step (training commands)
* ``digest.json``: content digests of every output, wall-clock fields excluded

Exit codes: 0 success, 2 configuration error, 3 state error, 4 IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from multirestore.ablation import AblationConfig, format_table, run_ablation
from multirestore.backbone import EncoderConfig, ModelConfig, RestorationModel
from multirestore.checkpoint import load_checkpoint, save_checkpoint, stable_json
from multirestore.config import config_digest, dump_config, load_config, task_specs
from multirestore.data import (
    DatasetManifest,
    TaskData,
    build_manifest,
    derive_seed,
    load_task_data,
    read_rgb,
    scenes_to_clean,
    toy_task_data,
    write_rgb,
    write_toy_scenes,
)
from multirestore.degradations import DegradationKind, apply_degradation, quantize8
from multirestore.errors import ConfigurationError, RegistryError, StateError
from multirestore.evaluate import evaluate
from multirestore.heads import ToyHeads, pretrain_heads
from multirestore.scenes import generate_scenes
from multirestore.tfa import build_variant
from multirestore.trainer import TrainConfig, add_task, pretrain_autoencoder, run_stage1, run_stage2

log = logging.getLogger("multirestore")

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "batch_size": 8,
    "image_size": 64,
    "data.scenes": 200,
    "data.kinds": ["gaussian_noise:3"],
    "eval.scenes": 50,
    "eval.scene_seed": 999,
    "sample_steps": 1,
}


class JsonlLog:
    """Collects step records and mirrors them to ``log.jsonl``."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []
        self._fh = path.open("w")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def digest(self) -> str:
        stripped = [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]
        return _sha(stable_json(stripped))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for key in ("seed", "workers", "steps", "gate", "resume"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    return cfg


def _kinds(cfg: dict, key: str = "data.kinds") -> list[DegradationKind]:
    raw = cfg.get(key)
    if isinstance(raw, str):
        raw = [raw]
    try:
        return [DegradationKind.parse(k) for k in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: {exc}") from exc


def _toy_data(cfg: dict, prefix: str, seed_default: int) -> TaskData:
    n = int(cfg.get(f"{prefix}.scenes", DEFAULTS["data.scenes"]))
    scene_seed = int(cfg.get(f"{prefix}.scene_seed", seed_default))
    scenes = generate_scenes(n, scene_seed, size=int(cfg["image_size"]))
    return toy_task_data(scenes, _kinds(cfg), derive_seed(int(cfg["seed"]), scene_seed))


def _data(cfg: dict, prefix: str = "data", manifest: str | None = None) -> TaskData:
    manifest = manifest or cfg.get(f"{prefix}.manifest")
    if manifest:
        return load_task_data(DatasetManifest.load(manifest))
    return _toy_data(cfg, prefix, 1 if prefix == "data" else int(cfg["eval.scene_seed"]))


def _checkpoint(cfg: dict, required_stage: str, overrides: dict | None = None):
    path = cfg.get("resume") or cfg.get("checkpoint")
    if not path:
        raise StateError(f"no input checkpoint given; this command needs a {required_stage} checkpoint")
    model, heads, meta = load_checkpoint(path, overrides)
    if required_stage not in model.trained_stages:
        raise StateError(f"{path} has stages {model.trained_stages}; a {required_stage} checkpoint is required")
    return model, heads, meta


def _start_step(cfg: dict, meta: dict, stage: str) -> int:
    # continuing the same stage from a --resume checkpoint keeps step numbering
    if cfg.get("resume") and meta.get("stage") == stage:
        return int(meta.get("end_step", 0))
    return 0


def _finish(out: Path, cfg: dict, outputs: dict) -> dict:
    digest = {"config": config_digest(cfg), "outputs": outputs}
    digest["run"] = _sha(stable_json(digest))
    (out / "digest.json").write_text(json.dumps(digest, indent=1, sort_keys=True) + "\n")
    return digest


def _write_config(out: Path, cfg: dict) -> None:
    (out / "config.resolved").write_text(dump_config(cfg))


def cmd_synth(cfg: dict, out: Path, plots: bool) -> dict:
    """Clean scenes (given or generated), degraded PNGs and a manifest."""
    clean_dir = out / "clean"
    src = cfg.get("synth.clean_dir")
    if clean_dir.exists():
        shutil.rmtree(clean_dir)
    if src:
        src = Path(src)
        if not src.is_dir():
            raise FileNotFoundError(f"clean image directory not found: {src}")
        shutil.copytree(src, clean_dir)
    else:
        write_toy_scenes(clean_dir, int(cfg.get("synth.images", 10)), int(cfg["seed"]), int(cfg["image_size"]))
    names = cfg.get("synth.kinds", ["gaussian_noise", "fog"])
    severities = cfg.get("synth.severities", [1, 3, 5])
    try:
        kinds = [DegradationKind(n, int(s)) for n in names for s in severities]
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    manifest = build_manifest(clean_dir, kinds, int(cfg["seed"]))
    deg_dir = out / "degraded"
    if deg_dir.exists():
        shutil.rmtree(deg_dir)
    deg_dir.mkdir(parents=True)
    for k, e in enumerate(manifest.entries):
        img = read_rgb(manifest.resolve(e.clean_path))
        name = f"{k:06d}_{e.kind}_{e.severity}.png"
        write_rgb(deg_dir / name, quantize8(apply_degradation(img, e.degradation, e.seed)))
        e.degraded_path = f"degraded/{name}"
    manifest.root = out
    manifest.save(out / "manifest.jsonl")
    manifest.validate()
    files = sorted(set(manifest.referenced_files()))
    h = hashlib.sha256()
    for p in files:
        h.update(str(p.relative_to(out)).encode())
        h.update(p.read_bytes())
    log.info("wrote %d degraded images", len(manifest))
    return {"manifest": manifest.digest(), "files": h.hexdigest(), "count": len(manifest)}


def _model_config(cfg: dict) -> ModelConfig:
    channels = tuple(cfg.get("model.channels", (16, 32, 64)))
    return ModelConfig(
        encoder=EncoderConfig(channels=channels, image_size=int(cfg["image_size"])),
        gate=cfg.get("gate", "softmax"),
        prompt_dim=int(cfg.get("model.prompt_dim", 64)),
        use_cfrm=bool(cfg.get("model.use_cfrm", True)),
        use_tfa=bool(cfg.get("model.use_tfa", True)),
    )


def cmd_pretrain_ae(cfg: dict, out: Path, jlog: JsonlLog) -> dict:
    """Autoencoder reconstruction pre-training plus the frozen recognition heads."""
    seed = int(cfg["seed"])
    torch.manual_seed(seed)
    try:
        model = RestorationModel(_model_config(cfg))
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    scenes = generate_scenes(int(cfg.get("pretrain.scenes", 2000)), seed + 1, size=int(cfg["image_size"]))
    clean = scenes_to_clean(scenes)
    steps = int(cfg.get("steps", 2500))
    res = pretrain_autoencoder(
        model, clean, TrainConfig(stage="pretrain", steps=steps, batch_size=int(cfg.get("pretrain.batch_size", 16)), seed=seed), jlog
    )
    heads = None
    head_steps = int(cfg.get("heads.steps", 600))
    if head_steps > 0:
        torch.manual_seed(seed)
        heads = ToyHeads()
        ids = torch.tensor([s.class_id for s in scenes])
        masks = torch.stack([torch.from_numpy(s.mask.astype("int64")) for s in scenes])
        pretrain_heads(heads, clean, ids, masks, steps=head_steps, seed=seed)
    digest = save_checkpoint(out / "checkpoint.pt", model, heads, {"stage": "pretrain", "end_step": res.end_step, "seed": seed})
    return {"checkpoint": digest, "log": jlog.digest()}


def cmd_train_stage1(cfg: dict, out: Path, jlog: JsonlLog) -> dict:
    model, heads, meta = _checkpoint(cfg, "pretrain")
    start = _start_step(cfg, meta, "stage1")
    conf = TrainConfig(
        stage="stage1",
        steps=int(cfg.get("steps", 1000)),
        batch_size=int(cfg["batch_size"]),
        learning_rate=cfg.get("stage1.lr"),
        seed=int(cfg["seed"]),
        lambdas=cfg.get("stage1.lambdas"),
    )
    res = run_stage1(model, _data(cfg), conf, jlog, heads, start_step=start)
    digest = save_checkpoint(out / "checkpoint.pt", model, heads, {"stage": "stage1", "end_step": res.end_step, "seed": conf.seed})
    return {"checkpoint": digest, "log": jlog.digest()}


def _tasks(cfg: dict, only: str | None = None):
    specs = task_specs(cfg)
    if only is not None:
        specs = [s for s in specs if s.task_id == only]
    if not specs:
        raise ConfigurationError("no task.<id>.kind entries in the config" if only is None else f"task {only!r} is not configured")
    shared = None
    tasks = []
    for spec in specs:
        if spec.manifest:
            tasks.append((spec, _data(cfg, manifest=spec.manifest)))
        else:
            shared = shared if shared is not None else _data(cfg)
            tasks.append((spec, shared))
    return tasks


def _plan(cfg: dict, model: RestorationModel, task_ids: list[str]):
    variant = cfg.get("stage2.variant")
    if not variant:
        return None
    try:
        torch.manual_seed(int(cfg["seed"]))
        return build_variant(variant, task_ids, list(model.config.encoder.channels)[::-1], model.config.prompt_dim, model.config.gate)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def cmd_train_stage2(cfg: dict, out: Path, jlog: JsonlLog) -> dict:
    overrides = {"gate": cfg["gate"]} if "gate" in cfg else None
    model, heads, meta = _checkpoint(cfg, "stage1", overrides)
    if heads is None:
        raise StateError("the stage-1 checkpoint carries no recognition heads")
    tasks = _tasks(cfg)
    conf = TrainConfig(
        stage="stage2",
        steps=int(cfg.get("steps", 600)),
        batch_size=int(cfg["batch_size"]),
        learning_rate=cfg.get("stage2.lr"),
        seed=int(cfg["seed"]),
        sample_steps=int(cfg["sample_steps"]),
    )
    plan = _plan(cfg, model, [s.task_id for s, _ in tasks])
    res = run_stage2(model, heads, tasks, conf, jlog, plan=plan, start_step=_start_step(cfg, meta, "stage2"))
    digest = save_checkpoint(out / "checkpoint.pt", model, heads, {"stage": "stage2", "end_step": res.end_step, "seed": conf.seed})
    if plan is not None:
        torch.save({k: (v.state_dict() if isinstance(v, torch.nn.Module) else v.detach()) for k, v in plan.modules().items()}, out / "variant.pt")
    return {"checkpoint": digest, "log": jlog.digest(), "task_counts": res.task_counts}


def cmd_add_task(cfg: dict, out: Path, jlog: JsonlLog) -> dict:
    model, heads, _ = _checkpoint(cfg, "stage2")
    new = cfg.get("new_task")
    if not new:
        raise ConfigurationError("add-task needs new_task = <task id>")
    [(spec, data)] = _tasks(cfg, only=str(new))
    conf = TrainConfig(stage="add_task", steps=int(cfg.get("steps", 300)), batch_size=int(cfg["batch_size"]), learning_rate=cfg.get("add_task.lr"), seed=int(cfg["seed"]))
    res = add_task(model, heads, spec, data, conf, jlog)
    digest = save_checkpoint(out / "checkpoint.pt", model, heads, {"stage": "add_task", "end_step": res.end_step, "seed": conf.seed})
    return {"checkpoint": digest, "log": jlog.digest(), "changed": sorted(res.changed_groups())}


def cmd_eval(cfg: dict, out: Path, plots: bool) -> dict:
    model, heads, _ = _checkpoint(cfg, "pretrain")
    ev = _data(cfg, "eval")
    tasks = [(spec, ev) for spec, _ in _tasks_no_data(cfg)]
    report = evaluate(model, heads, tasks, sample_steps=int(cfg["sample_steps"]), workers=int(cfg["workers"]))
    text = stable_json(report)
    (out / "report.json").write_text(json.dumps(json.loads(text), indent=1, sort_keys=True) + "\n")
    if plots:
        from multirestore.plots import plot_eval

        plot_eval(report, out)
    return {"report": _sha(text)}


def _tasks_no_data(cfg: dict):
    specs = task_specs(cfg)
    if not specs:
        raise ConfigurationError("no task.<id>.kind entries in the config")
    return [(s, None) for s in specs]


def cmd_ablate(cfg: dict, out: Path, jlog: JsonlLog, plots: bool) -> dict:
    model, heads, _ = _checkpoint(cfg, "pretrain")
    fields = AblationConfig.__dataclass_fields__
    kwargs = {}
    for key, value in cfg.items():
        if key.startswith("ablation."):
            name = key.split(".", 1)[1]
            if name not in fields:
                raise ConfigurationError(f"unknown ablation option {name!r}")
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    if "steps" in cfg:
        kwargs.setdefault("stage1_steps", int(cfg["steps"]))
    kwargs.setdefault("seeds", (int(cfg["seed"]), int(cfg["seed"]) + 1, int(cfg["seed"]) + 2))
    result = run_ablation(model, heads, AblationConfig(**kwargs), log=jlog)
    text = stable_json(result)
    (out / "ablation.json").write_text(json.dumps(json.loads(text), indent=1, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(format_table(result) + "\n")
    print(format_table(result))
    if plots:
        from multirestore.plots import plot_ablation

        plot_ablation(result, out)
    return {"ablation": _sha(text), "complete": result["complete"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multirestore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain-ae", "train-stage1", "train-stage2", "add-task", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key/value config file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="evaluation worker threads")
        p.add_argument("--steps", type=int, help="training steps")
        p.add_argument("--gate", choices=("softmax", "sigmoid"))
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--plots", action="store_true", help="write PNG plots")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.workers is not None and args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_config(out, cfg)
        torch.manual_seed(int(cfg["seed"]))
        if args.command == "synth":
            outputs = cmd_synth(cfg, out, args.plots)
        elif args.command == "eval":
            outputs = cmd_eval(cfg, out, args.plots)
        else:
            jlog = JsonlLog(out / "log.jsonl")
            try:
                if args.command == "pretrain-ae":
                    outputs = cmd_pretrain_ae(cfg, out, jlog)
                elif args.command == "train-stage1":
                    outputs = cmd_train_stage1(cfg, out, jlog)
                elif args.command == "train-stage2":
                    outputs = cmd_train_stage2(cfg, out, jlog)
                elif args.command == "add-task":
                    outputs = cmd_add_task(cfg, out, jlog)
                else:
                    outputs = cmd_ablate(cfg, out, jlog, args.plots)
            finally:
                jlog.close()
        digest = _finish(out, cfg, outputs)
        print(json.dumps({"command": args.command, "out": str(out), "digest": digest["run"]}))
        return EXIT_OK
    except (ConfigurationError, RegistryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
