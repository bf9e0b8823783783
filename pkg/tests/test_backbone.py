import math

import pytest
import torch

from multirestore.backbone import (
    EncoderConfig,
    LatentState,
    ModelConfig,
    NoiseSchedule,
    RestorationModel,
    noise_schedule,
)
from multirestore.errors import ShapeError


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = RestorationModel()
    m.prompts.register("pir", torch.Generator().manual_seed(1))
    return m.eval()


def test_schedule_endpoints_and_monotonicity():
    s = NoiseSchedule(50)
    # first beta is 1e-4 scaled by 1000/50
    assert s(0) == pytest.approx(1 - 2e-3, abs=1e-12)
    vals = [s(t) for t in range(50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert 0 < vals[-1] < 1e-4
    assert noise_schedule(10) == s(10)
    with pytest.raises(ValueError):
        s(50)
    with pytest.raises(ValueError):
        s.alpha_bars(torch.tensor([-1]))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        EncoderConfig(channels=(32, 16))
    with pytest.raises(ValueError):
        EncoderConfig(channels=(16,))
    cfg = ModelConfig(gate="sigmoid", use_cfrm=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_encoder_shapes(model):
    feats, latent = model.encode(torch.rand(2, 3, 64, 64), model.cfrm)
    assert [tuple(f.shape) for f in feats] == [(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8)]
    assert latent.shape == (2, 4, 16, 16)
    with pytest.raises(ShapeError):
        model.encode(torch.rand(2, 3, 32, 32))


def test_restore_output_range(model):
    with torch.no_grad():
        out = model.restore(torch.rand(2, 3, 64, 64), "pir")
    assert out.shape == (2, 3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1


def test_zero_init_pipeline_matches_plain_pipeline(model):
    plain = RestorationModel(ModelConfig(use_cfrm=False, use_tfa=False))
    for name in ("encoder", "decoder", "controller", "tuner"):
        getattr(plain, name).load_state_dict(getattr(model, name).state_dict())
    x = torch.rand(3, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        assert torch.equal(model.restore(x, "pir"), plain.restore(x))


def test_decoder_requires_prompt_with_tfa(model):
    feats, latent = model.encode(torch.rand(1, 3, 64, 64))
    with pytest.raises(ValueError):
        model.decode(latent, feats, model.tfa, None)
    with pytest.raises(ShapeError):
        model.decode(latent, feats[:2], model.tfa, model.prompts.get("pir"))


def test_control_denoise_checks(model):
    z = torch.zeros(1, 4, 16, 16)
    with pytest.raises(ShapeError):
        model.control_denoise(LatentState(z, 3), torch.zeros(1, 4, 8, 8))
    with pytest.raises(ValueError):
        model.control_denoise(LatentState(z, 50), z)


def test_one_step_sampling_is_single_prediction(model):
    control = torch.randn(2, 4, 16, 16, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        direct = model.control_denoise(LatentState(torch.zeros_like(control), 49), control)
        assert torch.equal(model.sample_latent(control, 1), direct)
        multi = model.sample_latent(control, 5)
    assert multi.shape == control.shape and torch.isfinite(multi).all()
    with pytest.raises(ValueError):
        model.sample_latent(control, 0)


def test_groups_and_parameter_split(model):
    groups = model.groups()
    assert set(groups) == {"encoder", "decoder", "cfrm", "controller", "tuner", "tfa", "prompts.pir"}
    total = sum(p.numel() for p in model.parameters())
    assert total == sum(
        (g.numel() if isinstance(g, torch.nn.Parameter) else sum(p.numel() for p in g.parameters()))
        for g in groups.values()
    )
    plain = RestorationModel(ModelConfig(use_cfrm=False, use_tfa=False))
    assert "cfrm" not in plain.groups() and "tfa" not in plain.groups()


def test_timestep_embedding_range():
    from multirestore.backbone import timestep_embedding

    emb = timestep_embedding(torch.arange(50), 64)
    assert emb.shape == (50, 64)
    assert emb.abs().max() <= 1.0
    assert not math.isclose(float(emb[0, 40]), float(emb[49, 40]))
