import math

import pytest
import torch

from multirestore.errors import ConfigurationError
from multirestore.heads import (
    IGNORE_INDEX,
    TaskSpec,
    ToyClassifier,
    ToyHeads,
    combined_stage2_loss,
    pretrain_heads,
    task_loss,
)
from multirestore.scenes import generate_scenes
from multirestore.data import scenes_to_clean


@pytest.fixture()
def heads():
    torch.manual_seed(0)
    return ToyHeads().freeze()


def test_pir_identity_is_zero():
    img = torch.rand(2, 3, 16, 16)
    assert float(task_loss(img, TaskSpec("p", "pir"), img)) == 0.0


def test_two_class_uniform_logits_is_ln2(heads):
    clf = ToyClassifier(num_classes=2)
    with torch.no_grad():
        clf.fc.weight.zero_()
        clf.fc.bias.zero_()
    heads.classifier = clf
    loss = task_loss(torch.rand(3, 3, 64, 64), TaskSpec("c", "classification"), torch.tensor([0, 1, 0]), heads)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_all_ignored_segmentation_is_zero_with_zero_grad(heads):
    img = torch.rand(2, 3, 32, 32, requires_grad=True)
    mask = torch.full((2, 32, 32), IGNORE_INDEX, dtype=torch.long)
    loss = task_loss(img, TaskSpec("s", "segmentation"), mask, heads)
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(img.grad) == 0


def test_losses_are_finite_and_nonnegative(heads):
    img = torch.rand(2, 3, 64, 64)
    mask = torch.randint(0, 4, (2, 64, 64))
    for spec, target in [
        (TaskSpec("p", "pir"), torch.rand(2, 3, 64, 64)),
        (TaskSpec("c", "classification"), torch.tensor([1, 3])),
        (TaskSpec("s", "segmentation"), mask),
    ]:
        value = float(task_loss(img, spec, target, heads))
        assert value >= 0 and math.isfinite(value)


def test_label_kind_mismatch(heads):
    img = torch.rand(2, 3, 64, 64)
    with pytest.raises(ValueError):
        task_loss(img, TaskSpec("c", "classification"), torch.zeros(2, 64, 64, dtype=torch.long), heads)
    with pytest.raises(ValueError):
        task_loss(img, TaskSpec("s", "segmentation"), torch.tensor([0, 1]), heads)
    with pytest.raises(ValueError):
        task_loss(img, TaskSpec("p", "pir"), torch.tensor([0, 1]), heads)


def test_task_spec_validation():
    with pytest.raises(ConfigurationError):
        TaskSpec("x", "detection")
    with pytest.raises(ConfigurationError):
        TaskSpec("x", "pir", beta=float("inf"))


def test_combined_loss_examples():
    specs = [TaskSpec("p", "pir"), TaskSpec("s", "segmentation"), TaskSpec("c", "classification")]
    losses = [torch.tensor(0.5), torch.tensor(0.2), torch.tensor(0.3)]
    assert float(combined_stage2_loss(list(zip(specs, losses)))) == pytest.approx(1.0)
    assert float(combined_stage2_loss([(TaskSpec("c", "classification", beta=2.0), torch.tensor(0.3))])) == pytest.approx(0.6)
    x = torch.tensor(0.7, requires_grad=True)
    total = combined_stage2_loss([(TaskSpec("p", "pir", beta=0.0), x * 2)])
    total.backward()
    assert total.item() == 0.0 and x.grad.item() == 0.0
    with pytest.raises(ConfigurationError):
        combined_stage2_loss([(TaskSpec("p", "pir", beta=-1.0), torch.tensor(1.0))])
    with pytest.raises(ValueError):
        combined_stage2_loss([])


def test_pretrain_heads_freezes_and_learns():
    scenes = generate_scenes(64, seed=5, size=64)
    images = scenes_to_clean(scenes)
    ids = torch.tensor([s.class_id for s in scenes])
    masks = torch.stack([torch.from_numpy(s.mask.astype("int64")) for s in scenes])
    heads = ToyHeads()
    first = pretrain_heads(heads, images, ids, masks, steps=1, batch_size=16)
    last = pretrain_heads(ToyHeads(), images, ids, masks, steps=60, batch_size=16)
    assert last["segmentation"] < first["segmentation"]
    assert not any(p.requires_grad for p in heads.parameters())
    assert not heads.training
