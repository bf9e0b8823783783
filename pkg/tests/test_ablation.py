import pytest
import torch

from multirestore.ablation import AblationConfig, AblationRow, directional_checks, format_table, run_ablation
from multirestore.backbone import EncoderConfig, ModelConfig, RestorationModel
from multirestore.data import scenes_to_clean
from multirestore.errors import StateError
from multirestore.heads import ToyHeads
from multirestore.scenes import generate_scenes
from multirestore.tfa import VARIANTS, audit_tuned_params
from multirestore.trainer import TrainConfig, pretrain_autoencoder

SMALL = ModelConfig(encoder=EncoderConfig(channels=(8, 16), image_size=32), prompt_dim=8, controller_width=16)
TINY = dict(train_scenes=6, eval_scenes=4, stage1_steps=2, stage2_steps=3, batch_size=2, seeds=(0, 1))


@pytest.fixture(scope="module")
def base():
    torch.manual_seed(0)
    model = RestorationModel(SMALL)
    clean = scenes_to_clean(generate_scenes(8, 1, size=32))
    pretrain_autoencoder(model, clean, TrainConfig(stage="pretrain", steps=2, batch_size=4))
    return model, ToyHeads().freeze()


def test_all_configurations_with_seeds(base):
    model, heads = base
    result = run_ablation(model, heads, AblationConfig(**TINY))
    rows = result["rows"]
    components = {(r["config"], r["seed"]) for r in rows if r["table"] == "components"}
    assert components == {(c, s) for c in ("baseline", "w/o CFRM", "w/o TFA", "full") for s in (0, 1)}
    variants = [r for r in rows if r["table"] == "variants"]
    assert [r["config"] for r in variants] == list(VARIANTS)
    assert result["complete"]
    assert len(result["summary"]) == 8
    for r in variants:
        assert r["tuned_params"] == audit_tuned_params(r["config"], 3, (16, 8), 8)
    full = next(r for r in rows if r["config"] == "full" and r["seed"] == 0)
    shared = next(r for r in variants if r["config"] == "shared_tfa_per_task_prompt")
    assert shared["psnr"] == full["psnr"]
    assert result["checks"]["psnr_vs_wo_cfrm"]["compared"] == 2
    assert "w/o CFRM" in format_table(result)


def test_tuned_parameter_identities(base):
    model, heads = base
    result = run_ablation(model, heads, AblationConfig(**{**TINY, "seeds": (0,), "variants": False}))
    t = {r["config"]: r["tuned_params"] for r in result["rows"]}
    assert t["full"] - t["w/o TFA"] == t["w/o CFRM"] - t["baseline"]
    assert t["full"] - t["w/o CFRM"] == sum(p.numel() for p in model.cfrm.parameters())


def test_ablation_is_deterministic(base):
    model, heads = base
    cfg = AblationConfig(**{**TINY, "seeds": (0,), "variants": False})
    assert run_ablation(model, heads, cfg)["rows"] == run_ablation(model, heads, cfg)["rows"]


def test_budget_marks_partial_table(base):
    model, heads = base
    result = run_ablation(model, heads, AblationConfig(**TINY, budget_seconds=0.0))
    assert not result["complete"]
    assert all(r["status"] == "budget_exceeded" for r in result["rows"])
    assert len([r for r in result["rows"] if r["table"] == "components"]) == 8
    assert "budget_exceeded" in format_table(result)


def test_requires_pretrained_base():
    with pytest.raises(StateError):
        run_ablation(RestorationModel(SMALL), ToyHeads(), AblationConfig(**TINY))


def test_directional_checks_count_ties_as_wins():
    rows = [
        AblationRow("components", "full", 0, psnr=20.0, accuracy=0.5),
        AblationRow("components", "w/o TFA", 0, psnr=19.0, accuracy=0.5),
        AblationRow("components", "w/o CFRM", 0, psnr=21.0, accuracy=0.4),
    ]
    checks = directional_checks(rows)
    assert checks["accuracy_vs_wo_tfa"] == {"wins": 1, "compared": 1, "per_seed": [True]}
    assert checks["psnr_vs_wo_cfrm"]["wins"] == 0
