"""Image enhancement network: a high-resolution multi-branch trunk whose
normalization layers are pluggable.

The default modulation ("rad") group-normalizes image features and applies
elementwise scale and shift predicted from encoded G-buffer features at the
branch's scale. Swapping the modulation turns the same trunk into the
controlled-experiment variants: plain affine group norm, instance norm with
channelwise G-buffer concatenation at the input, or a SPADE-style modulation
computed from the raw (resized) G-buffer stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ResidualBlock, clamp_unit_interval
from .encoder import FeaturePyramid, validate_pyramid
from .errors import ConfigurationError, ShapeError

MODULATION_KINDS = ("rad", "groupnorm", "instance", "spade")


@dataclass
class EnhancerConfig:
    scales: tuple[int, ...] = (1, 2, 4, 8)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    gn_groups: int = 8
    modulation: str = "rad"
    rad_blocks: int = 3            # residual blocks inside each modulation module
    spade_hidden: int = 32
    in_channels: int = 3
    residual_output: bool = True   # head adds the input image before clamping

    def validate(self) -> None:
        if len(self.scales) != len(self.channels):
            raise ConfigurationError("scales and channels must align")
        if self.modulation not in MODULATION_KINDS:
            raise ConfigurationError(f"unknown modulation '{self.modulation}'")
        if self.blocks_per_stage < 1 or self.rad_blocks < 1:
            raise ConfigurationError("block counts must be >= 1")


def _groups_for(channels: int, requested: int) -> int:
    g = min(requested, channels)
    while channels % g != 0:
        g -= 1
    return g


class ModulatedGroupNorm(nn.Module):
    """Group-normalize image features, then scale and shift them elementwise
    with weights predicted from G-buffer features at the matching scale."""

    def __init__(self, channels: int, gbuf_channels: int, groups: int = 8,
                 n_blocks: int = 3):
        super().__init__()
        self.norm = nn.GroupNorm(_groups_for(channels, groups), channels, affine=False)
        self.transform = nn.Sequential(
            *[ResidualBlock(gbuf_channels, gbuf_channels) for _ in range(n_blocks)])
        self.to_scale = nn.Conv2d(gbuf_channels, channels, 1)
        self.to_shift = nn.Conv2d(gbuf_channels, channels, 1)
        with torch.no_grad():
            # Start near exact group norm (scale ~1, shift ~0): small emitter
            # weights keep activations bounded at init while every upstream
            # parameter still receives gradient.
            self.to_scale.weight.normal_(0.0, 1e-3)
            self.to_scale.bias.fill_(1.0)
            self.to_shift.weight.normal_(0.0, 1e-3)
            self.to_shift.bias.zero_()

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != g.shape[-2:]:
            raise ShapeError(
                f"image features {tuple(x.shape[-2:])} and G-buffer features "
                f"{tuple(g.shape[-2:])} disagree on spatial size")
        h = self.transform(g)
        return self.to_scale(h) * self.norm(x) + self.to_shift(h)

    @torch.no_grad()
    def force_constant_modulation(self, scale: torch.Tensor | float = 1.0,
                                  shift: torch.Tensor | float = 0.0) -> None:
        """Make scale/shift constant per channel (weights zeroed, biases set).
        With scale=1, shift=0 the module reduces exactly to group norm."""
        self.to_scale.weight.zero_()
        self.to_shift.weight.zero_()
        if isinstance(scale, torch.Tensor):
            self.to_scale.bias.copy_(scale)
        else:
            self.to_scale.bias.fill_(float(scale))
        if isinstance(shift, torch.Tensor):
            self.to_shift.bias.copy_(shift)
        else:
            self.to_shift.bias.fill_(float(shift))


def rad_forward(x: torch.Tensor, g: torch.Tensor,
                module: ModulatedGroupNorm) -> torch.Tensor:
    return module(x, g)


class AffineGroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups_for(channels, groups), channels, affine=True)

    def forward(self, x: torch.Tensor, context=None) -> torch.Tensor:
        return self.norm(x)


class AffineInstanceNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)

    def forward(self, x: torch.Tensor, context=None) -> torch.Tensor:
        return self.norm(x)


class SpadeModulation(nn.Module):
    """Scale/shift from a shared conv over the nearest-resized raw
    conditioning stack (no learned multi-scale encoding)."""

    def __init__(self, channels: int, raw_channels: int, hidden: int = 32,
                 groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups_for(channels, groups), channels, affine=False)
        self.shared = nn.Conv2d(raw_channels, hidden, 3, padding=1)
        self.to_scale = nn.Conv2d(hidden, channels, 3, padding=1)
        self.to_shift = nn.Conv2d(hidden, channels, 3, padding=1)
        with torch.no_grad():
            self.to_scale.weight.normal_(0.0, 1e-3)
            self.to_scale.bias.fill_(1.0)
            self.to_shift.weight.normal_(0.0, 1e-3)
            self.to_shift.bias.zero_()

    def forward(self, x: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
        m = F.interpolate(raw, size=x.shape[-2:], mode="nearest")
        h = F.relu(self.shared(m))
        return self.to_scale(h) * self.norm(x) + self.to_shift(h)


class TrunkBlock(nn.Module):
    """Residual block of the trunk: conv-norm-relu-conv-norm plus identity
    skip, ReLU after the sum. The norm slots hold the configured modulation."""

    def __init__(self, channels: int, make_norm):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = make_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = make_norm(channels)

    def forward(self, x: torch.Tensor, context) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x), context))
        h = self.norm2(self.conv2(h), context)
        return F.relu(h + x)


class FuseUnit(nn.Module):
    """Cross-branch exchange: bilinear-up + 1x1 conv from coarser branches,
    strided 3x3 convs from finer branches, summed then ReLU."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        n = len(channels)
        paths = {}
        for i in range(n):           # target branch
            for j in range(n):       # source branch
                if i == j:
                    continue
                if j > i:
                    paths[f"{j}to{i}"] = nn.Conv2d(channels[j], channels[i], 1)
                else:
                    steps = []
                    c = channels[j]
                    for step in range(i - j):
                        out_c = channels[i] if step == i - j - 1 else channels[j]
                        steps.append(nn.Conv2d(c, out_c, 3, stride=2, padding=1))
                        if step != i - j - 1:
                            steps.append(nn.ReLU())
                        c = out_c
                    paths[f"{j}to{i}"] = nn.Sequential(*steps)
        self.paths = nn.ModuleDict(paths)
        self.n = n

    def forward(self, branches: list[torch.Tensor]) -> list[torch.Tensor]:
        outs = []
        for i in range(self.n):
            acc = branches[i]
            for j in range(self.n):
                if j == i:
                    continue
                h = self.paths[f"{j}to{i}"](branches[j])
                if j > i:
                    h = F.interpolate(h, size=branches[i].shape[-2:],
                                      mode="bilinear", align_corners=False)
                acc = acc + h
            outs.append(F.relu(acc))
        return outs


class Enhancer(nn.Module):
    """Multi-branch trunk at full input resolution.

    `gbuf_channels` maps scale factor -> encoded G-buffer channel count and
    is required for the "rad" modulation; `raw_channels` is the conditioning
    stack width for "spade" and for input concatenation variants.
    """

    def __init__(self, config: EnhancerConfig | None = None,
                 gbuf_channels: dict[int, int] | None = None,
                 raw_channels: int | None = None):
        super().__init__()
        self.config = config or EnhancerConfig()
        self.config.validate()
        cfg = self.config
        if cfg.modulation == "rad":
            if gbuf_channels is None:
                raise ConfigurationError("rad modulation needs encoder channel map")
            missing = [s for s in cfg.scales if s not in gbuf_channels]
            if missing:
                raise ConfigurationError(
                    f"encoder does not provide scales {missing} required by the trunk")
        if cfg.modulation == "spade" and raw_channels is None:
            raise ConfigurationError("spade modulation needs raw_channels")
        self.gbuf_channels = gbuf_channels
        self.raw_channels = raw_channels

        def norm_factory(scale_factor: int):
            def make(channels: int) -> nn.Module:
                if cfg.modulation == "rad":
                    return _RadSlot(channels, gbuf_channels[scale_factor],
                                    scale_factor, cfg.gn_groups, cfg.rad_blocks)
                if cfg.modulation == "groupnorm":
                    return AffineGroupNorm(channels, cfg.gn_groups)
                if cfg.modulation == "instance":
                    return AffineInstanceNorm(channels)
                return SpadeModulation(channels, raw_channels, cfg.spade_hidden,
                                       cfg.gn_groups)
            return make

        c0 = cfg.channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c0, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c0, c0, 3, padding=1), nn.ReLU(),
        )
        n_stages = len(cfg.scales)
        self.stages = nn.ModuleList()
        self.fuses = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for stage in range(n_stages):
            width = stage + 1
            branch_blocks = nn.ModuleList()
            for b in range(width):
                blocks = nn.ModuleList(
                    [TrunkBlock(cfg.channels[b], norm_factory(cfg.scales[b]))
                     for _ in range(cfg.blocks_per_stage)])
                branch_blocks.append(blocks)
            self.stages.append(branch_blocks)
            self.fuses.append(FuseUnit(cfg.channels[:width]) if width > 1 else nn.Identity())
            if stage + 1 < n_stages:
                self.transitions.append(nn.Conv2d(
                    cfg.channels[stage], cfg.channels[stage + 1], 3, stride=2, padding=1))
        total = sum(cfg.channels)
        self.head = nn.Conv2d(total, 3, 3, padding=1)
        if cfg.residual_output:
            with torch.no_grad():
                # Near-identity start for the residual head; small nonzero
                # weights keep gradient flowing into the trunk.
                self.head.weight.normal_(0.0, 1e-3)
                self.head.bias.zero_()

    def forward(self, image: torch.Tensor, context=None) -> torch.Tensor:
        cfg = self.config
        h, w = image.shape[-2:]
        deepest = max(cfg.scales)
        if h % deepest or w % deepest:
            raise ShapeError(f"input size {(h, w)} must be divisible by {deepest}")
        if cfg.modulation == "rad":
            validate_pyramid(context, cfg.scales, h, w)
        branches = [self.stem(image)]
        for stage_idx, branch_blocks in enumerate(self.stages):
            new_branches = []
            for b, blocks in enumerate(branch_blocks):
                x = branches[b]
                for block in blocks:
                    x = block(x, context)
                new_branches.append(x)
            branches = new_branches
            if len(branches) > 1:
                branches = self.fuses[stage_idx](branches)
            if stage_idx + 1 < len(self.stages):
                branches.append(F.relu(self.transitions[stage_idx](branches[-1])))
        ups = [branches[0]]
        for b in branches[1:]:
            ups.append(F.interpolate(b, size=(h, w), mode="bilinear",
                                     align_corners=False))
        out = self.head(torch.cat(ups, dim=1))
        if cfg.residual_output:
            out = out + image[:, :3]
        return clamp_unit_interval(out)

    def iter_modulations(self):
        """Modulation modules in a fixed traversal order (stage, branch,
        block, slot); the order is identical across modulation kinds."""
        for branch_blocks in self.stages:
            for blocks in branch_blocks:
                for block in blocks:
                    yield block.norm1
                    yield block.norm2


class _RadSlot(ModulatedGroupNorm):
    """Modulation bound to one trunk scale; pulls its G-buffer tensor out of
    the feature pyramid passed as forward context."""

    def __init__(self, channels: int, gbuf_channels: int, scale_factor: int,
                 groups: int, n_blocks: int):
        super().__init__(channels, gbuf_channels, groups, n_blocks)
        self.scale_factor = scale_factor

    def forward(self, x: torch.Tensor, context: FeaturePyramid) -> torch.Tensor:
        if context is None or self.scale_factor not in context:
            raise ConfigurationError(
                f"feature pyramid is missing scale 1/{self.scale_factor}")
        return super().forward(x, context[self.scale_factor])


def copy_trunk_weights(src: Enhancer, dst: Enhancer) -> None:
    """Copy all identically named, identically shaped parameters (stem,
    trunk convs, fusion, transitions, head); modulation internals are left
    to the caller."""
    dst_state = dst.state_dict()
    for name, tensor in src.state_dict().items():
        if name in dst_state and dst_state[name].shape == tensor.shape:
            dst_state[name] = tensor.clone()
    dst.load_state_dict(dst_state)
