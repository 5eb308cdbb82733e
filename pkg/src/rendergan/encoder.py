"""G-buffer encoder: per-class streams fused by object masks, then a
residual chain emitting feature tensors at multiple scales.

Every stream sees the full G-buffer stack; the object-ID masks decide, per
pixel, which stream's features survive the fusion. Taps are taken before
each downsampling block (plus the deepest chain output), giving one tensor
per configured scale for the enhancement trunk to consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import ResidualBlock
from .errors import ConfigurationError, ShapeError
from .scenegen import GBufferSet, STACK_CHANNELS

# A feature pyramid maps downsample factor (1, 2, 4, 8) -> N x C x H/f x W/f.
FeaturePyramid = dict[int, torch.Tensor]


@dataclass
class EncoderConfig:
    n_streams: int = 5
    in_channels: int = STACK_CHANNELS
    base_channels: int = 16
    scales: tuple[int, ...] = (1, 2, 4, 8)

    def validate(self) -> None:
        if self.n_streams < 1:
            raise ConfigurationError("n_streams must be >= 1")
        if tuple(sorted(self.scales)) != tuple(self.scales) or self.scales[0] != 1:
            raise ConfigurationError("scales must be ascending and start at 1")
        for s in self.scales:
            if s not in (1, 2, 4, 8):
                raise ConfigurationError(f"unsupported scale factor {s}")

    def channels_at(self, factor: int) -> int:
        # Geometric doubling from the base width at full resolution.
        return self.base_channels * factor

    def channel_map(self) -> dict[int, int]:
        return {s: self.channels_at(s) for s in self.scales}


def fuse_streams(stream_features: list[torch.Tensor], masks: torch.Tensor,
                 tol: float = 1e-4) -> torch.Tensor:
    """Mask-weighted sum of per-class stream features.

    `masks` is N x C x h x w with one channel per stream; they must sum to 1
    at every pixel (soft masks from area downsampling are fine). The result
    is differentiable w.r.t. every stream tensor.
    """
    if len(stream_features) != masks.shape[1]:
        raise ShapeError(
            f"got {len(stream_features)} streams but {masks.shape[1]} masks")
    ref = stream_features[0].shape
    for i, f in enumerate(stream_features):
        if f.shape != ref:
            raise ShapeError(f"stream {i} shape {tuple(f.shape)} != {tuple(ref)}")
    if masks.shape[-2:] != ref[-2:]:
        raise ShapeError(
            f"mask resolution {tuple(masks.shape[-2:])} does not match "
            f"feature resolution {tuple(ref[-2:])}")
    total = masks.sum(dim=1)
    if not torch.all((total - 1.0).abs() <= tol):
        raise ValueError("object masks must sum to 1 at every pixel")
    out = torch.zeros_like(stream_features[0])
    for c, f in enumerate(stream_features):
        out = out + masks[:, c:c + 1] * f
    return out


def downsample_masks(masks: torch.Tensor, factor: int) -> torch.Tensor:
    """Area-average mask downsampling; preserves the sum-to-1 partition."""
    if factor == 1:
        return masks
    return torch.nn.functional.avg_pool2d(masks, kernel_size=factor, stride=factor)


class GBufferEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        self.config.validate()
        cfg = self.config
        base = cfg.base_channels
        self.streams = nn.ModuleList([
            nn.Sequential(ResidualBlock(cfg.in_channels, base),
                          ResidualBlock(base, base))
            for _ in range(cfg.n_streams)
        ])
        self.entry = ResidualBlock(base, base)
        # One (downsampling RB, refining RB) pair per octave below full res.
        deepest = max(cfg.scales)
        stages = []
        ch = base
        factor = 1
        while factor < deepest:
            stages.append(nn.Sequential(ResidualBlock(ch, ch * 2, stride=2),
                                        ResidualBlock(ch * 2, ch * 2)))
            ch *= 2
            factor *= 2
        self.stages = nn.ModuleList(stages)

    def forward(self, stack: torch.Tensor, masks: torch.Tensor) -> FeaturePyramid:
        """stack: N x in_channels x H x W, masks: N x n_streams x H x W."""
        if stack.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} G-buffer channels, "
                f"got {stack.shape[1]}")
        if masks.shape[1] != self.config.n_streams:
            raise ShapeError(
                f"expected {self.config.n_streams} object masks, got {masks.shape[1]}")
        feats = [stream(stack) for stream in self.streams]
        fused = fuse_streams(feats, masks)
        pyramid: FeaturePyramid = {}
        h = self.entry(fused)
        factor = 1
        if factor in self.config.scales:
            pyramid[factor] = h
        for stage in self.stages:
            h = stage(h)
            factor *= 2
            if factor in self.config.scales:
                pyramid[factor] = h
        return pyramid


def validate_pyramid(pyramid: FeaturePyramid, scales: tuple[int, ...],
                     height: int, width: int) -> None:
    for s in scales:
        if s not in pyramid:
            raise ConfigurationError(f"feature pyramid is missing scale 1/{s}")
        t = pyramid[s]
        if t.shape[-2:] != (height // s, width // s):
            raise ShapeError(
                f"pyramid scale 1/{s} has spatial size {tuple(t.shape[-2:])}, "
                f"expected {(height // s, width // s)}")
        if not torch.isfinite(t).all():
            raise ValueError(f"pyramid scale 1/{s} contains non-finite values")


def gbuffers_to_tensors(gbuf: GBufferSet, dtype: torch.dtype = torch.float32
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """GBufferSet -> (1 x C x H x W stack, 1 x n_obj x H x W masks)."""
    stack = torch.from_numpy(np.ascontiguousarray(gbuf.stack())).to(dtype)
    stack = stack.permute(2, 0, 1).unsqueeze(0)
    masks = torch.from_numpy(np.ascontiguousarray(gbuf.object_masks)).to(dtype).unsqueeze(0)
    return stack, masks
