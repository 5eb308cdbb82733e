"""Frozen multi-tap feature pyramid.

Stands in for a pretrained perceptual network: five single-conv stages with
tap strides (1, 2, 4, 8, 16) and widths (64, 128, 256, 512, 512). Weights are
drawn once from a fixed-seed generator and never trained, so features are
deterministic and cheap to reproduce anywhere. Anything exposing the same
tap interface (e.g. an actual pretrained network) can be dropped in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    strides: tuple[int, ...] = (1, 2, 2, 2, 2)
    kernel: int = 3
    seed: int = 2177
    in_channels: int = 3

    def validate(self) -> None:
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have equal length")


def receptive_fields(kernels: list[int], strides: list[int]) -> list[int]:
    """Receptive field after each layer by the standard recurrence
    r <- r + (k - 1) * j, j <- j * s."""
    r, j = 1, 1
    out = []
    for k, s in zip(kernels, strides):
        r += (k - 1) * j
        j *= s
        out.append(r)
    return out


class FrozenBackbone(nn.Module):
    """Deterministic frozen convolutional pyramid with one tap per stage."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.config.validate()
        gen = torch.Generator().manual_seed(self.config.seed)
        convs = []
        c_in = self.config.in_channels
        self.stage_specs: list[tuple[int, int, int, int]] = []
        for width, stride in zip(self.config.widths, self.config.strides):
            conv = nn.Conv2d(c_in, width, self.config.kernel, stride=stride,
                             padding=self.config.kernel // 2)
            with torch.no_grad():
                fan_in = c_in * self.config.kernel ** 2
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            self.stage_specs.append((self.config.kernel, stride, c_in, width))
            c_in = width
        self.stages = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def n_taps(self) -> int:
        return len(self.stages)

    @property
    def feature_dim(self) -> int:
        return self.config.widths[-1]

    def tap_receptive_fields(self) -> list[int]:
        return receptive_fields([self.config.kernel] * self.n_taps,
                                list(self.config.strides))

    @property
    def deepest_receptive_field(self) -> int:
        return self.tap_receptive_fields()[-1]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Images N x 3 x H x W in [0, 1] -> taps L1..L5, shallow to deep."""
        h = x * 2.0 - 1.0
        taps = []
        for conv in self.stages:
            h = F.relu(conv(h))
            taps.append(h)
        return taps

    def train(self, mode: bool = True):
        # A frozen provider stays in eval mode even inside a training loop.
        return super().train(False)


def unit_normalize_channels(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return x / (x.norm(dim=1, keepdim=True) + eps)


def normalized_feature_distance(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """Per-pixel squared L2 distance between channel-unit-normalized feature
    vectors, averaged over batch and space (channels are summed, not
    averaged, so the value does not shrink with tap width)."""
    diff = unit_normalize_channels(fa) - unit_normalize_channels(fb)
    return diff.pow(2).sum(dim=1).mean()


def perceptual_distance(backbone: FrozenBackbone, a: torch.Tensor,
                        b: torch.Tensor) -> torch.Tensor:
    """Structure-retention distance: mean squared distance between
    channel-unit-normalized tap features, averaged over taps with equal
    weights. Differentiable w.r.t. both images."""
    taps_a = backbone(a)
    taps_b = backbone(b)
    total = a.new_zeros(())
    for fa, fb in zip(taps_a, taps_b):
        total = total + normalized_feature_distance(fa, fb)
    return total / len(taps_a)


@torch.no_grad()
def pooled_features(backbone: FrozenBackbone, images: np.ndarray | torch.Tensor,
                    tap: int = -1, batch_size: int = 32) -> np.ndarray:
    """Global-average-pooled tap features, one vector per image (float64).

    `images` is N x H x W x 3 (numpy, [0, 1]) or an N x 3 x H x W tensor.
    """
    if isinstance(images, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(images)).float().permute(0, 3, 1, 2)
    else:
        t = images.float()
    outs = []
    for start in range(0, t.shape[0], batch_size):
        chunk = t[start:start + batch_size]
        feats = backbone(chunk)[tap]
        outs.append(feats.mean(dim=(2, 3)).double().cpu().numpy())
    return np.concatenate(outs, axis=0)


@torch.no_grad()
def tap_features_for_patches(backbone: FrozenBackbone, patches: np.ndarray,
                             taps: list[int], batch_size: int = 64) -> dict[int, np.ndarray]:
    """Pooled features at several taps in one pass over the patches.

    `patches` is N x H x W x 3 in [0, 1]; returns {tap index (1-based):
    N x C float64}.
    """
    t = torch.from_numpy(np.ascontiguousarray(patches)).float().permute(0, 3, 1, 2)
    pooled: dict[int, list[np.ndarray]] = {k: [] for k in taps}
    for start in range(0, t.shape[0], batch_size):
        feats = backbone(t[start:start + batch_size])
        for k in taps:
            pooled[k].append(feats[k - 1].mean(dim=(2, 3)).double().cpu().numpy())
    return {k: np.concatenate(v, axis=0) for k, v in pooled.items()}
