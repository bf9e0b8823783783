import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multirestore.errors import RegistryError, ShapeError
from multirestore.tfa import (
    VARIANTS,
    PromptBank,
    TfaLayer,
    TfaStack,
    audit_tuned_params,
    build_variant,
    tfa_forward,
    tfa_stack_forward,
)
from oracles import central_difference


def randomize_(module, seed, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def test_zero_init_leaves_latent_unchanged():
    torch.manual_seed(0)
    layer = TfaLayer(8, dim=16)
    f_enc, f_lat = torch.randn(2, 8, 8, 8), torch.randn(2, 8, 8, 8)
    out, c = tfa_forward(f_enc, f_lat, torch.randn(16), layer)
    assert torch.equal(out, f_lat)
    assert c.shape == (2, 16)


def test_gates_sum_to_one():
    layer = randomize_(TfaLayer(8, dim=8), 1)
    f, i = layer.gates(torch.randn(4, 8, 8, 8))
    assert torch.allclose(f.sum(-1), torch.ones(4), atol=1e-6)
    assert torch.allclose(i.sum(-1), torch.ones(4), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 50.0))
def test_softmax_gates_property(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    layer = randomize_(TfaLayer(4, dim=8), seed % 1000)
    x = torch.randn(3, 4, 5, 5, generator=gen) * scale
    for g in layer.gates(x):
        assert torch.all(g > 0) and torch.all(g < 1)
        assert torch.allclose(g.sum(-1), torch.ones(3), atol=1e-6)


def test_sigmoid_gate_switch():
    layer = randomize_(TfaLayer(4, dim=8, gate="sigmoid"), 2)
    f, _ = layer.gates(torch.randn(2, 4, 5, 5))
    assert not torch.allclose(f.sum(-1), torch.ones(2))
    with pytest.raises(ValueError):
        TfaLayer(4, gate="relu")


def test_finite_difference_wrt_cell_state():
    layer = randomize_(TfaLayer(6, dim=8), 3).double()
    rng = np.random.default_rng(4)
    f_enc = torch.from_numpy(rng.standard_normal((1, 6, 8, 8)))
    f_lat = torch.from_numpy(rng.standard_normal((1, 6, 8, 8)))
    weights = torch.from_numpy(rng.standard_normal((1, 6, 8, 8)))
    c0 = rng.standard_normal((1, 8))

    def scalar(c):
        out, _ = layer(f_enc, f_lat, c)
        return (out * weights).sum()

    ct = torch.from_numpy(c0.copy()).requires_grad_(True)
    scalar(ct).backward()
    with torch.no_grad():
        for k in range(8):
            numeric = central_difference(lambda a: float(scalar(torch.from_numpy(a))), c0, (0, k))
            analytic = float(ct.grad[0, k])
            assert abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-8) < 1e-4


def test_argument_errors():
    layer = TfaLayer(4, dim=8)
    with pytest.raises(ValueError):
        layer(torch.randn(1, 4, 4, 4), torch.randn(1, 4, 4, 4), torch.randn(5))
    with pytest.raises(ShapeError):
        layer(torch.randn(1, 4, 4, 4), torch.randn(1, 4, 2, 2), torch.randn(8))


def _pyramid(channels=(4, 6, 8), sizes=(16, 8, 4), batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, c, s, s, generator=gen) for c, s in zip(channels, sizes)]


def test_stack_threads_cell_state_m_times():
    stack = randomize_(TfaStack([8, 6, 4], dim=8), 5)
    pyr = _pyramid()
    dec = [p.clone() for p in pyr[::-1]]
    calls = []
    for layer in stack.layers:
        layer.register_forward_hook(lambda m, inp, out: calls.append(out[1]))
    prompt = torch.randn(8)
    fused, c_final = tfa_stack_forward(stack, pyr, dec, prompt)
    assert len(calls) == 3
    assert torch.equal(c_final, calls[-1])
    assert [f.shape for f in fused] == [d.shape for d in dec]


def test_stack_zero_init_is_pass_through():
    stack = TfaStack([8, 6, 4], dim=8)
    pyr = _pyramid()
    dec = [torch.randn_like(p) for p in pyr[::-1]]
    fused, _ = tfa_stack_forward(stack, pyr, dec, torch.randn(8))
    assert all(torch.equal(a, b) for a, b in zip(fused, dec))


def test_cell_norm_bound_with_zero_candidate_branch():
    for seed in range(20):
        layer = randomize_(TfaLayer(5, dim=8), seed)
        with torch.no_grad():
            layer.theta_c.conv.weight.zero_()
            layer.theta_c.conv.bias.zero_()
        gen = torch.Generator().manual_seed(seed)
        c = torch.randn(3, 8, generator=gen)
        f_enc = torch.randn(3, 5, 6, 6, generator=gen)
        _, c_next = layer(f_enc, torch.randn(3, 5, 6, 6, generator=gen), c)
        assert torch.all(c_next.abs().sum(-1) <= c.abs().sum(-1))


def test_prompt_isolation():
    stack = randomize_(TfaStack([8, 6, 4], dim=8), 6)
    bank = PromptBank(8)
    for t in ("a", "b", "c"):
        bank.register(t, torch.Generator().manual_seed(len(t)))
    pyr = _pyramid()
    dec = [torch.randn_like(p) for p in pyr[::-1]]
    fused, _ = tfa_stack_forward(stack, pyr, dec, bank.get("b"))
    sum(f.sum() for f in fused).backward()
    assert bank.get("b").grad is not None and bank.get("b").grad.abs().sum() > 0
    assert bank.get("a").grad is None and bank.get("c").grad is None


def test_prompt_registry_errors():
    bank = PromptBank(8)
    bank.register("pir")
    with pytest.raises(RegistryError):
        bank.register("pir")
    with pytest.raises(KeyError):
        bank.get("missing")


def test_different_prompts_give_different_outputs():
    stack = randomize_(TfaStack([8, 6, 4], dim=8), 7)
    pyr = _pyramid()
    dec = [torch.randn_like(p) for p in pyr[::-1]]
    a, _ = tfa_stack_forward(stack, pyr, dec, torch.randn(8))
    b, _ = tfa_stack_forward(stack, pyr, dec, torch.randn(8))
    assert not torch.allclose(a[-1], b[-1])


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_audit_scaling_laws(k):
    d = 64
    per_task = audit_tuned_params("shared_tfa_per_task_prompt", k)
    assert per_task - audit_tuned_params("shared_tfa_per_task_prompt", 1) == (k - 1) * d
    assert audit_tuned_params("multi_tfa", k) == k * audit_tuned_params("multi_tfa", 1)
    assert audit_tuned_params("shared_tfa_single_prompt", k) == audit_tuned_params("shared_tfa_single_prompt", 1)
    assert audit_tuned_params("multi_adapter", k) == k * audit_tuned_params("multi_adapter", 1)


def test_audit_counts_match_module_sizes():
    stack = TfaStack([64, 32, 16], dim=64)
    n = sum(p.numel() for p in stack.parameters())
    assert audit_tuned_params("shared_tfa_single_prompt", 3) == n + 64
    assert audit_tuned_params("multi_tfa", 1) == n + 64


def test_variant_plans():
    for v in VARIANTS:
        plan = build_variant(v, ["x", "y"], [8, 6, 4], dim=8)
        assert plan.fusion("x") is not None
        with pytest.raises(KeyError):
            plan.fusion("z")
    shared = build_variant("shared_tfa_single_prompt", ["x", "y"], [8, 6, 4], dim=8)
    assert shared.prompt("x") is shared.prompt("y")
    assert build_variant("multi_adapter", ["x"], [8, 6, 4]).prompt("x") is None
