"""Toy-scale component ablation and adapter-variant comparison.

Two tables are produced from one pre-trained autoencoder plus frozen heads:

* components: ``baseline`` (neither CFRM nor TFA), ``w/o CFRM``, ``w/o TFA``
  and ``full``, all with the same stage-1 and stage-2 step budgets;
* variants: the four stage-2 fusion designs trained on the same stage-1
  model (``shared_tfa_per_task_prompt`` is the full model's own run).

Rows that would start after the time budget is spent are emitted with
``status = "budget_exceeded"`` and no metrics.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import torch

from multirestore.backbone import ModelConfig, RestorationModel
from multirestore.data import TaskData, derive_seed, toy_task_data
from multirestore.degradations import DegradationKind
from multirestore.errors import StateError
from multirestore.evaluate import evaluate
from multirestore.heads import TaskSpec, ToyHeads
from multirestore.scenes import generate_scenes
from multirestore.tfa import VARIANTS, audit_tuned_params, build_variant
from multirestore.trainer import TrainConfig, run_stage1, run_stage2

COMPONENT_CONFIGS = {
    "baseline": {"use_cfrm": False, "use_tfa": False},
    "w/o CFRM": {"use_cfrm": False, "use_tfa": True},
    "w/o TFA": {"use_cfrm": True, "use_tfa": False},
    "full": {"use_cfrm": True, "use_tfa": True},
}
TASK_IDS = ("pir", "cls", "seg")


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    kinds: tuple[str, ...] = ("gaussian_noise:3", "fog:3", "contrast:3")
    train_scenes: int = 600
    eval_scenes: int = 100
    eval_seed: int = 999
    stage1_steps: int = 1500
    stage2_steps: int = 600
    batch_size: int = 8
    stage1_lr: float | None = None
    stage2_lr: float | None = 3e-4
    # MSE on [0,1] images is ~100x smaller than the heads' cross-entropy
    betas: dict[str, float] = field(default_factory=lambda: {"pir": 300.0, "cls": 1.0, "seg": 1.0})
    variants: bool = True
    variant_seeds: tuple[int, ...] | None = None
    budget_seconds: float | None = None

    def task_specs(self) -> list[TaskSpec]:
        kinds = {"pir": "pir", "cls": "classification", "seg": "segmentation"}
        return [TaskSpec(t, kinds[t], beta=float(self.betas.get(t, 1.0))) for t in TASK_IDS]


@dataclass
class AblationRow:
    table: str
    config: str
    seed: int
    status: str = "ok"
    psnr: float | None = None
    ssim: float | None = None
    accuracy: float | None = None
    miou: float | None = None
    tuned_params: int | None = None


def derive_model(base: RestorationModel, **overrides) -> RestorationModel:
    """A copy of ``base`` with config overrides; shared groups keep their weights."""
    cfg = ModelConfig.from_dict({**base.config.to_dict(), **overrides})
    model = RestorationModel(cfg)
    src = base.groups()
    for name, mod in model.groups().items():
        if name in src and not name.startswith("prompts."):
            mod.load_state_dict(src[name].state_dict())
    model.trained_stages = list(base.trained_stages)
    return model


def _count(*objs) -> int:
    total = 0
    for o in objs:
        if o is None:
            continue
        total += o.numel() if isinstance(o, torch.nn.Parameter) else sum(p.numel() for p in o.parameters())
    return total


def _metrics(report: dict) -> dict:
    seg = report["seg"]["restored"]
    return {
        "psnr": report["pir"]["restored"]["psnr"],
        "ssim": report["pir"]["restored"]["ssim"],
        "accuracy": report["cls"]["restored"]["accuracy"],
        "miou": seg["miou"],
    }


def build_data(cfg: AblationConfig, seed: int, image_size: int) -> TaskData:
    kinds = [DegradationKind.parse(k) for k in cfg.kinds]
    scenes = generate_scenes(cfg.train_scenes, derive_seed(seed, 1), size=image_size)
    return toy_task_data(scenes, kinds, derive_seed(seed, 2))


def build_eval_data(cfg: AblationConfig, image_size: int) -> TaskData:
    kinds = [DegradationKind.parse(k) for k in cfg.kinds]
    scenes = generate_scenes(cfg.eval_scenes, cfg.eval_seed, size=image_size)
    return toy_task_data(scenes, kinds, derive_seed(cfg.eval_seed, 2))


def run_ablation(base: RestorationModel, heads: ToyHeads, cfg: AblationConfig, log=None) -> dict:
    """Train and evaluate every configuration; returns ``{"rows", "summary", "checks"}``."""
    if "pretrain" not in base.trained_stages:
        raise StateError("ablation needs a pre-trained autoencoder checkpoint")
    if heads is None:
        raise StateError("ablation needs a checkpoint with recognition heads")
    t0 = time.perf_counter()
    size = base.config.encoder.image_size
    channels = list(base.config.encoder.channels)[::-1]
    dim = base.config.prompt_dim
    specs = cfg.task_specs()
    ev = build_eval_data(cfg, size)
    variant_seeds = cfg.seeds[:1] if cfg.variant_seeds is None else cfg.variant_seeds
    rows: list[AblationRow] = []

    def over_budget() -> bool:
        return cfg.budget_seconds is not None and time.perf_counter() - t0 > cfg.budget_seconds

    def score(model, plan=None) -> dict:
        return _metrics(evaluate(model, heads, [(s, ev) for s in specs], plan=plan))

    def stage2(model, seed, plan=None):
        conf = TrainConfig(
            stage="stage2", steps=cfg.stage2_steps, batch_size=cfg.batch_size,
            learning_rate=cfg.stage2_lr, seed=seed,
        )
        run_stage2(model, heads, [(s, data) for s in specs], conf, log=log, plan=plan)

    for seed in cfg.seeds:
        data = build_data(cfg, seed, size)
        for use_cfrm in (False, True):
            no_tfa, with_tfa = ("baseline", "w/o CFRM") if not use_cfrm else ("w/o TFA", "full")
            if over_budget():
                rows += [AblationRow("components", n, seed, "budget_exceeded") for n in (no_tfa, with_tfa)]
                continue
            torch.manual_seed(seed)
            model = derive_model(base, **COMPONENT_CONFIGS[with_tfa])
            s1 = TrainConfig(
                stage="stage1", steps=cfg.stage1_steps, batch_size=cfg.batch_size,
                learning_rate=cfg.stage1_lr, seed=seed,
            )
            run_stage1(model, data, s1, log=log)
            stage1_params = _count(model.cfrm, model.controller, model.tuner)
            rows.append(AblationRow("components", no_tfa, seed, tuned_params=stage1_params, **score(model)))
            stage1_model = copy.deepcopy(model) if use_cfrm and cfg.variants and seed in variant_seeds else None
            if over_budget():
                rows.append(AblationRow("components", with_tfa, seed, "budget_exceeded"))
            else:
                stage2(model, seed)
                tuned = stage1_params + _count(model.tfa, *[model.prompts.get(t) for t in TASK_IDS])
                rows.append(AblationRow("components", with_tfa, seed, tuned_params=tuned, **score(model)))
            if stage1_model is None:
                continue
            full = rows[-1]
            for variant in VARIANTS:
                count = audit_tuned_params(variant, len(TASK_IDS), tuple(channels), dim)
                if variant == "shared_tfa_per_task_prompt":
                    metrics = {k: getattr(full, k) for k in ("psnr", "ssim", "accuracy", "miou")}
                    rows.append(AblationRow("variants", variant, seed, full.status, tuned_params=count, **metrics))
                    continue
                if over_budget():
                    rows.append(AblationRow("variants", variant, seed, "budget_exceeded", tuned_params=count))
                    continue
                torch.manual_seed(derive_seed(seed, VARIANTS.index(variant)))
                plan = build_variant(variant, list(TASK_IDS), channels, dim, base.config.gate)
                model = copy.deepcopy(stage1_model)
                stage2(model, seed, plan)
                rows.append(AblationRow("variants", variant, seed, tuned_params=count, **score(model, plan)))

    return {
        "config": asdict(cfg),
        "rows": [asdict(r) for r in rows],
        "summary": summarize(rows),
        "checks": directional_checks(rows),
        "complete": all(r.status == "ok" for r in rows),
    }


def summarize(rows: list[AblationRow]) -> dict:
    """Per (table, config) means over the seeds that completed."""
    out: dict = {}
    for r in rows:
        entry = out.setdefault(f"{r.table}/{r.config}", {"seeds": [], "tuned_params": r.tuned_params})
        if r.status != "ok":
            continue
        entry["seeds"].append(r.seed)
        for k in ("psnr", "ssim", "accuracy", "miou"):
            v = getattr(r, k)
            if v is not None:
                entry.setdefault(f"_{k}", []).append(v)
    for entry in out.values():
        for k in ("psnr", "ssim", "accuracy", "miou"):
            vals = entry.pop(f"_{k}", [])
            entry[k] = sum(vals) / len(vals) if vals else None
    return out


def directional_checks(rows: list[AblationRow]) -> dict:
    """Per-seed comparisons: full vs w/o TFA on accuracy, full vs w/o CFRM on PSNR."""
    by = {(r.config, r.seed): r for r in rows if r.table == "components" and r.status == "ok"}
    seeds = sorted({r.seed for r in rows})
    out = {}
    for name, other, metric in (("accuracy_vs_wo_tfa", "w/o TFA", "accuracy"), ("psnr_vs_wo_cfrm", "w/o CFRM", "psnr")):
        wins = []
        for s in seeds:
            a, b = by.get(("full", s)), by.get((other, s))
            if a is not None and b is not None:
                wins.append(bool(getattr(a, metric) >= getattr(b, metric)))
        out[name] = {"wins": sum(wins), "compared": len(wins), "per_seed": wins}
    return out


def format_table(result: dict) -> str:
    """Plain-text table of every row."""
    head = f"{'table':<11}{'config':<28}{'seed':>5}{'psnr':>8}{'ssim':>7}{'acc':>7}{'miou':>7}{'tuned':>10}  status"
    lines = [head, "-" * len(head)]

    def fmt(v, spec):
        width = int(spec.rstrip("dfs").split(".")[0])
        return format(v, spec) if v is not None else "-".rjust(width)

    for r in result["rows"]:
        lines.append(
            f"{r['table']:<11}{r['config']:<28}{r['seed']:>5}{fmt(r['psnr'], '8.2f')}{fmt(r['ssim'], '7.3f')}"
            f"{fmt(r['accuracy'], '7.3f')}{fmt(r['miou'], '7.3f')}{fmt(r['tuned_params'], '10d')}  {r['status']}"
        )
    return "\n".join(lines)
