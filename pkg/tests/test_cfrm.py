import numpy as np
import pytest
import torch

from multirestore.cfrm import CfrmBlock, CfrmConfig, CfrmStack, cfrm_feature_loss, cfrm_forward
from multirestore.errors import ShapeError
from oracles import central_difference


def randomize_(module, seed, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def test_config_group_arithmetic():
    cfg = CfrmConfig(16, 4)
    assert cfg.expanded == 64
    assert cfg.group_channels == 16
    with pytest.raises(ValueError):
        CfrmConfig(3, 5)


def test_zero_init_is_exact_pass_through():
    torch.manual_seed(0)
    block = CfrmBlock(CfrmConfig(16, 4))
    f = torch.randn(2, 16, 8, 8)
    assert torch.equal(cfrm_forward(f, block), f)


@pytest.mark.parametrize("channels", [16, 32, 64])
def test_shape_preserved(channels):
    block = randomize_(CfrmBlock(CfrmConfig(channels, 4)), 1)
    f = torch.randn(2, channels, 8, 8)
    assert block(f).shape == f.shape


def test_weight_shapes():
    block = randomize_(CfrmBlock(CfrmConfig(8, 4)), 2)
    x = torch.randn(3, 32, 6, 6)
    assert block.intra_group_weights(x).shape == (3, 4, 8, 1, 1)
    assert block.inter_group_weights(x).shape == (3, 4, 1, 1, 1)


def test_channel_mismatch():
    block = CfrmBlock(CfrmConfig(16, 4))
    with pytest.raises(ShapeError):
        block(torch.randn(1, 8, 8, 8))


def test_intra_weights_depend_only_on_own_group():
    block = randomize_(CfrmBlock(CfrmConfig(8, 4)), 3)
    x = torch.randn(2, 32, 6, 6)
    base = block.intra_group_weights(x)
    for g in range(4):
        masked = x.clone()
        masked[:, g * 8 : (g + 1) * 8] = 0.0
        w = block.intra_group_weights(masked)
        for other in range(4):
            if other != g:
                assert torch.equal(w[:, other], base[:, other])
        assert not torch.equal(w[:, g], base[:, g])


def test_finite_difference_gradient_double():
    torch.manual_seed(4)
    block = randomize_(CfrmBlock(CfrmConfig(8, 4)), 5).double()
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((1, 8, 8, 8))

    def f(arr):
        with torch.no_grad():
            return float(block(torch.from_numpy(arr)).sum())

    xt = torch.from_numpy(x0.copy()).requires_grad_(True)
    block(xt).sum().backward()
    analytic = xt.grad.numpy()
    for _ in range(10):
        idx = tuple(int(rng.integers(0, s)) for s in x0.shape)
        numeric = central_difference(f, x0, idx, 1e-5)
        rel = abs(analytic[idx] - numeric) / max(abs(numeric), abs(analytic[idx]), 1e-8)
        assert rel < 1e-4


def test_stack_has_block_per_layer():
    stack = CfrmStack([16, 32, 64], groups=4)
    assert len(stack) == 3
    assert stack[2].config.in_channels == 64


def test_feature_loss_examples():
    clear = [torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2)]
    restored = [torch.full((1, 1, 2, 2), 0.3), torch.full((1, 1, 2, 2), -0.5)]
    assert float(cfrm_feature_loss(clear, clear, [1.0, 1.0])) == 0.0
    assert float(cfrm_feature_loss(restored, clear, [1.0, 1.0])) == pytest.approx(0.8)
    assert float(cfrm_feature_loss(restored, clear, [2.0, 2.0])) == pytest.approx(1.6)
    # lambda = 0 masks a layer entirely
    assert float(cfrm_feature_loss(restored, clear, [0.0, 1.0])) == pytest.approx(0.5)


def test_feature_loss_errors():
    a = [torch.zeros(1, 2, 4, 4)]
    with pytest.raises(ShapeError):
        cfrm_feature_loss(a, [torch.zeros(1, 2, 2, 2)], [1.0])
    with pytest.raises(ValueError):
        cfrm_feature_loss(a, a, [-1.0])
    with pytest.raises(ShapeError):
        cfrm_feature_loss(a, a + a, [1.0])
