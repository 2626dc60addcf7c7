import pytest
import torch
import torch.nn as nn

from fidcal import backbones as bb


@pytest.fixture(scope="module")
def desk():
    torch.manual_seed(0)
    return bb.DeskNet(10).eval()


def test_desk_sites(desk):
    split = bb.split_backbone(desk)
    assert len(split.insertion_points) == 4
    assert split.insertion_points[0] == "input"
    assert split.feature_dim == 64
    assert split.site_shapes((3, 32, 32)) == [(3, 32, 32), (16, 32, 32), (32, 16, 16), (64, 8, 8)]


def test_split_recomposes_exactly(desk):
    split = bb.split_backbone(desk)
    x = torch.randn(100, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        assert (split(x) - desk(x)).abs().max().item() == 0


def test_head_xavier_zero_bias(desk):
    assert torch.count_nonzero(desk.fc.bias) == 0
    bound = (6 / (desk.fc.in_features + desk.fc.out_features)) ** 0.5
    assert desk.fc.weight.abs().max() <= bound


def test_resnet50_split():
    torch.manual_seed(0)
    model = bb.build_backbone("resnet50", 257).eval()
    split = bb.split_backbone(model)
    assert split.feature_dim == 2048
    assert split.insertion_points[0] == "input" and len(split.insertion_points) == 3
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        assert (split(x) - model(x)).abs().max().item() == 0


def test_freeze_keeps_eval_mode(desk):
    split = bb.split_backbone(desk).freeze()
    split.train()
    assert not split.training
    assert not any(p.requires_grad for p in split.parameters())


def test_rejects_headless():
    with pytest.raises(ValueError):
        bb.split_backbone(nn.Sequential(nn.Conv2d(3, 4, 3)))
    with pytest.raises(ValueError):
        bb.split_backbone(nn.Sequential(nn.Flatten(), nn.Linear(4, 2), nn.ReLU()))


def test_warns_without_pooling():
    with pytest.warns(UserWarning):
        split = bb.split_backbone(nn.Sequential(nn.Flatten(), nn.Linear(12, 2)))
    assert split.insertion_points == ["input"]


def test_unknown_arch():
    with pytest.raises(ValueError):
        bb.build_backbone("vgg", 3)


def test_classifier_checkpoint(tmp_path, desk):
    bb.save_classifier(tmp_path / "c.ckpt", desk, "desk", 10)
    back, ck = bb.load_classifier(tmp_path / "c.ckpt")
    x = torch.randn(3, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(back(x), desk(x))
