import numpy as np
import pytest
import torch

from rendergan.encoder import (EncoderConfig, GBufferEncoder, downsample_masks,
                               fuse_streams, gbuffers_to_tensors,
                               validate_pyramid)
from rendergan.errors import ConfigurationError, ShapeError


def partition_masks(rng, n, c, h, w, dtype=torch.float64):
    labels = torch.from_numpy(rng.integers(0, c, size=(n, h, w)))
    return torch.stack([(labels == i).to(dtype) for i in range(c)], dim=1)


# ---------------------------------------------------------------------------
# fuse_streams


def test_fuse_single_full_mask_returns_stream(rng):
    f0 = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    f1 = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    masks = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
    masks[:, 0] = 1.0
    assert torch.equal(fuse_streams([f0, f1], masks), f0)


def test_fuse_rejects_all_zero_masks(rng):
    f = [torch.randn(1, 3, 4, 4) for _ in range(2)]
    with pytest.raises(ValueError):
        fuse_streams(f, torch.zeros(1, 2, 4, 4))


def test_fuse_matches_per_pixel_loop_oracle(rng):
    h = w = 2
    streams = [torch.from_numpy(rng.normal(size=(1, 3, h, w))) for _ in range(2)]
    masks = partition_masks(rng, 1, 2, h, w)
    fused = fuse_streams(streams, masks).numpy()
    for y in range(h):
        for x in range(w):
            expected = sum(masks[0, c, y, x].item() * streams[c][0, :, y, x].numpy()
                           for c in range(2))
            assert np.max(np.abs(fused[0, :, y, x] - expected)) <= 1e-12


def test_fuse_linearity_and_mask_locality(rng):
    h = w = 5
    streams = [torch.from_numpy(rng.normal(size=(1, 4, h, w))) for _ in range(3)]
    masks = partition_masks(rng, 1, 3, h, w)
    base = fuse_streams(streams, masks)
    scaled = fuse_streams([2.5 * f for f in streams], masks)
    assert torch.allclose(scaled, 2.5 * base, atol=1e-12)
    # changing a stream only where its mask is zero changes nothing
    bump = streams[1].clone()
    bump[0, :, masks[0, 1] == 0] += 7.0
    assert torch.equal(fuse_streams([streams[0], bump, streams[2]], masks), base)


def test_fuse_shape_errors(rng):
    f = [torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)]
    with pytest.raises(ShapeError):
        fuse_streams(f, torch.ones(1, 3, 4, 4) / 3.0)  # 3 masks, 2 streams
    with pytest.raises(ShapeError):
        fuse_streams(f, torch.ones(1, 2, 8, 8) / 2.0)  # resolution mismatch
    f_bad = [torch.randn(1, 3, 4, 4), torch.randn(1, 4, 4, 4)]
    with pytest.raises(ShapeError):
        fuse_streams(f_bad, torch.ones(1, 2, 4, 4) / 2.0)


def test_fuse_is_differentiable(rng):
    streams = [torch.randn(1, 2, 4, 4, requires_grad=True) for _ in range(2)]
    masks = partition_masks(rng, 1, 2, 4, 4, dtype=torch.float32)
    fuse_streams(streams, masks).sum().backward()
    for f in streams:
        assert f.grad is not None


def test_mask_downsampling_preserves_partition(rng):
    masks = partition_masks(rng, 1, 4, 16, 16, dtype=torch.float32)
    down = downsample_masks(masks, 4)
    assert down.shape == (1, 4, 4, 4)
    assert torch.allclose(down.sum(dim=1), torch.ones(1, 4, 4), atol=1e-6)


# ---------------------------------------------------------------------------
# encoder


def small_cfg():
    return EncoderConfig(n_streams=3, in_channels=6, base_channels=4,
                         scales=(1, 2, 4))


def test_pyramid_shape_contract(rng):
    torch.manual_seed(0)
    enc = GBufferEncoder(small_cfg())
    stack = torch.randn(1, 6, 16, 16)
    masks = partition_masks(rng, 1, 3, 16, 16, dtype=torch.float32)
    pyr = enc(stack, masks)
    assert sorted(pyr) == [1, 2, 4]
    assert pyr[1].shape == (1, 4, 16, 16)
    assert pyr[2].shape == (1, 8, 8, 8)
    assert pyr[4].shape == (1, 16, 4, 4)
    validate_pyramid(pyr, (1, 2, 4), 16, 16)


def test_channel_map_geometric_doubling():
    cfg = EncoderConfig(base_channels=16, scales=(1, 2, 4, 8))
    assert cfg.channel_map() == {1: 16, 2: 32, 4: 64, 8: 128}


def test_stream_permutation_symmetry(rng):
    torch.manual_seed(1)
    enc = GBufferEncoder(small_cfg())
    enc.eval()
    stack = torch.randn(1, 6, 16, 16)
    masks = partition_masks(rng, 1, 3, 16, 16, dtype=torch.float32)
    base = enc(stack, masks)
    # permute two object groups together with their masks and stream weights
    enc.streams[0], enc.streams[2] = enc.streams[2], enc.streams[0]
    perm = masks[:, [2, 1, 0]]
    swapped = enc(stack, perm)
    for s in base:
        assert torch.allclose(base[s], swapped[s], atol=1e-6)


def test_encoder_rejects_wrong_channels(rng):
    enc = GBufferEncoder(small_cfg())
    masks = partition_masks(rng, 1, 3, 8, 8, dtype=torch.float32)
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 5, 8, 8), masks)
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 6, 8, 8), masks[:, :2])


def test_encoder_gradient_matches_finite_differences(rng):
    torch.manual_seed(2)
    cfg = EncoderConfig(n_streams=2, in_channels=4, base_channels=4, scales=(1, 2))
    enc = GBufferEncoder(cfg).double().eval()
    stack = torch.from_numpy(rng.normal(size=(1, 4, 16, 16)))
    masks = partition_masks(rng, 1, 2, 16, 16)
    probes = {s: torch.from_numpy(rng.normal(size=(1, cfg.channels_at(s),
                                                    16 // s, 16 // s)))
              for s in cfg.scales}

    def loss_of(stack_in):
        pyr = enc(stack_in, masks)
        return sum((pyr[s] * probes[s]).sum() for s in cfg.scales)

    x = stack.clone().requires_grad_(True)
    loss_of(x).backward()
    channel = 2
    grad_ad = x.grad[0, channel].numpy()
    h = 1e-6
    grad_fd = np.zeros_like(grad_ad)
    with torch.no_grad():
        for i in range(16):
            for j in range(16):
                up = stack.clone()
                up[0, channel, i, j] += h
                down = stack.clone()
                down[0, channel, i, j] -= h
                grad_fd[i, j] = (float(loss_of(up)) - float(loss_of(down))) / (2 * h)
    rel = np.linalg.norm(grad_ad - grad_fd) / np.linalg.norm(grad_fd)
    assert rel < 1e-4


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(scales=(2, 1)).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(scales=(1, 3)).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(n_streams=0).validate()


def test_gbuffers_to_tensors(tiny_source):
    stack, masks = gbuffers_to_tensors(tiny_source[0].gbuffers)
    assert stack.shape == (1, 14, 64, 64)
    assert masks.shape == (1, 5, 64, 64)
    assert torch.allclose(masks.sum(dim=1), torch.ones(1, 64, 64))
