import numpy as np
import torch
from torch import nn

from rendergan.backbone import (BackboneConfig, FrozenBackbone,
                                perceptual_distance, pooled_features,
                                receptive_fields)


def test_recurrence_values():
    assert receptive_fields([3, 3, 3, 3, 3], [1, 2, 2, 2, 2]) == [3, 5, 9, 17, 33]
    assert receptive_fields([3], [1]) == [3]


def test_default_backbone_geometry(backbone):
    assert backbone.n_taps == 5
    assert backbone.feature_dim == 512
    assert backbone.config.widths == (64, 128, 256, 512, 512)
    # cumulative tap strides 1, 2, 4, 8, 16
    x = torch.rand(1, 3, 64, 64)
    taps = backbone(x)
    assert [t.shape[-1] for t in taps] == [64, 32, 16, 8, 4]
    assert backbone.deepest_receptive_field == 33


def test_impulse_probe_matches_recurrence(backbone):
    """Footprint of the center output's input gradient equals the computed
    receptive field, probed on a positive-weight linear stack with the same
    geometry (so no activation can sever a path)."""
    convs = []
    for k, s, cin, cout in backbone.stage_specs:
        conv = nn.Conv2d(cin, cout, k, stride=s, padding=k // 2, bias=False)
        with torch.no_grad():
            conv.weight.abs_().add_(0.01)
        convs.append(conv)
    stack = nn.Sequential(*convs)
    rf = backbone.deepest_receptive_field
    size = 4 * rf
    x = torch.ones(1, 3, size, size, requires_grad=True)
    out = stack(x)
    c = out.shape[-1] // 2
    out[0, :, c, c].sum().backward()
    fp = (x.grad[0].abs().sum(dim=0) > 0).numpy()
    rows = np.nonzero(fp.any(axis=1))[0]
    cols = np.nonzero(fp.any(axis=0))[0]
    assert rows[-1] - rows[0] + 1 == rf
    assert cols[-1] - cols[0] + 1 == rf


def test_backbone_is_deterministic_and_frozen(backbone):
    x = torch.rand(2, 3, 32, 32)
    a = backbone(x)
    b = backbone(x)
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)
    fresh = FrozenBackbone(BackboneConfig())
    for p, q in zip(backbone.parameters(), fresh.parameters()):
        assert torch.equal(p, q)
    assert all(not p.requires_grad for p in backbone.parameters())


def test_backbone_stays_eval_in_train_mode(backbone):
    backbone.train()
    assert backbone.training is False


def test_tap_resolutions_strictly_decrease(backbone):
    taps = backbone(torch.rand(1, 3, 64, 64))
    sizes = [t.shape[-1] for t in taps]
    assert all(a > b for a, b in zip(sizes[:-1], sizes[1:]))


def test_perceptual_distance_zero_on_identical_and_positive_on_noise(backbone):
    a = torch.rand(1, 3, 32, 32)
    assert float(perceptual_distance(backbone, a, a)) == 0.0
    b = torch.clamp(a + 0.2 * torch.randn_like(a), 0, 1)
    assert float(perceptual_distance(backbone, a, b)) > 0


def test_pooled_features_shape(backbone, rng):
    images = rng.random((5, 64, 64, 3)).astype(np.float32)
    feats = pooled_features(backbone, images)
    assert feats.shape == (5, 512)
    assert feats.dtype == np.float64
