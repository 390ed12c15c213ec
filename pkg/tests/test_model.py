import importlib.util

import numpy as np
import pytest
import torch

from crossreid.data import DomainDataset, ImageRecord
from crossreid.model import ModelConfig, extract_descriptor, forward_features, init_model


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig(num_classes=5, seed=0))


def test_forward_shapes(model):
    x = np.random.default_rng(0).uniform(-1, 1, size=(7, 64, 32, 3)).astype(np.float32)
    out = forward_features(model, x, "eval")
    assert out.pool_feat.shape == (7, 64)
    assert out.emb1024.shape == (7, 1024)
    assert out.logits.shape == (7, 5)
    assert out.emb128.shape == (7, 128)


def test_eval_is_deterministic(model):
    x = np.random.default_rng(1).uniform(-1, 1, size=(4, 64, 32, 3)).astype(np.float32)
    a, b = forward_features(model, x, "eval"), forward_features(model, x, "eval")
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_train_mode_updates_running_stats():
    m = init_model(ModelConfig(num_classes=3, seed=0))
    bn = m.backbone.features[0][1]
    before = bn.running_mean.clone()
    x = np.random.default_rng(2).uniform(-1, 1, size=(4, 64, 32, 3)).astype(np.float32)
    forward_features(m, x, "train")
    assert not torch.equal(before, bn.running_mean)


def test_seeded_init_is_reproducible():
    a = init_model(ModelConfig(num_classes=4, seed=3)).state_dict()
    b = init_model(ModelConfig(num_classes=4, seed=3)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = init_model(ModelConfig(num_classes=4, seed=4)).state_dict()
    assert not torch.equal(a["emb128.weight"], c["emb128.weight"])


@pytest.mark.parametrize("p", [751, 702])
def test_classifier_width(p):
    m = init_model(ModelConfig(num_classes=p, image_size=(32, 16), desk_channels=(2, 2, 2, 2)))
    assert m.classifier.out_features == p


def test_init_errors():
    with pytest.raises(ValueError):
        init_model(ModelConfig(num_classes=1))
    with pytest.raises(ValueError):
        init_model(ModelConfig(num_classes=3, backbone="vgg"))


def test_shape_mismatch(model):
    with pytest.raises(ValueError):
        forward_features(model, np.zeros((2, 32, 32, 3), np.float32))


def test_extract_descriptor_rows(model):
    img = np.random.default_rng(3).uniform(-1, 1, size=(2, 64, 32, 3)).astype(np.float32)
    pix = np.stack([img[0], img[1], img[0]])
    ds = DomainDataset([ImageRecord(f"{i}.png", i, 1, "T") for i in range(3)], pix)
    d = extract_descriptor(model, ds)
    assert d.shape == (3, 64) and d.dtype == np.float64
    assert np.array_equal(d[0], d[2])
    assert not np.array_equal(d[0], d[1])


@pytest.mark.skipif(importlib.util.find_spec("torchvision") is None, reason="torchvision not installed")
def test_resnet50_descriptor_width():
    m = init_model(ModelConfig(num_classes=3, backbone="resnet50", image_size=(64, 32)))
    out = forward_features(m, np.zeros((2, 64, 32, 3), np.float32))
    assert m.pool_dim == 2048 and out.pool_feat.shape == (2, 2048)


def test_emb128_independent_of_classifier(model):
    x = np.random.default_rng(4).uniform(-1, 1, size=(3, 64, 32, 3)).astype(np.float32)
    before = forward_features(model, x).emb128
    with torch.no_grad():
        saved = model.classifier.weight.clone()
        model.classifier.weight.add_(torch.randn_like(saved))
    after = forward_features(model, x).emb128
    with torch.no_grad():
        model.classifier.weight.copy_(saved)
    assert torch.equal(before, after)


def test_triplet_gradient_reaches_backbone():
    from crossreid.losses import batch_hard_triplet_loss
    m = init_model(ModelConfig(num_classes=3, seed=0)).train()
    x = torch.from_numpy(np.random.default_rng(5).uniform(-1, 1, size=(6, 3, 64, 32)).astype(np.float32))
    loss = batch_hard_triplet_loss(m(x).emb128, torch.tensor([0, 0, 1, 1, 2, 2]), margin=100.0)
    loss.backward()
    assert m.backbone.features[0][0].weight.grad.abs().sum() > 0
    assert m.emb1024[0].weight.grad.abs().sum() > 0
    assert m.classifier.weight.grad is None
