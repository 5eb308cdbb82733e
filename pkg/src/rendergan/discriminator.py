"""Perceptual discriminator ensemble.

A frozen backbone supplies feature taps at five levels and a label provider
supplies class maps; one small discriminator net per level scores realism on
its tap. Each net is a stack of five Convolution-GroupNorm-LeakyReLU layers
producing a 256-channel tensor y, a Convolution-LeakyReLU-Convolution head
producing a one-channel map z, and a per-class 256-d embedding table fused
with y via an inner product: s = z + sum_ch y * e[label].

The PatchGAN variant reuses the same stem/head on raw images at four scales,
without the embedding projection.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FrozenBackbone
from .errors import PaletteError

EMBED_DIM = 256


@dataclass
class DiscriminatorConfig:
    stem_widths: tuple[int, ...] = (48, 96, 96, 192, 256)
    stem_strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    head_hidden: int = 64
    n_classes: int = 5
    use_projection: bool = True
    leak: float = 0.2
    gn_groups: int = 8
    patchgan_scales: tuple[int, ...] = (1, 2, 4, 8)

    def validate(self) -> None:
        if self.stem_widths[-1] != EMBED_DIM:
            raise ValueError(
                f"stem must end at {EMBED_DIM} channels to match the embedding")
        if len(self.stem_widths) != 5 or len(self.stem_strides) != 5:
            raise ValueError("stem is a stack of five CGL layers")


def _gn(channels: int, groups: int) -> nn.GroupNorm:
    g = min(groups, channels)
    while channels % g != 0:
        g -= 1
    return nn.GroupNorm(g, channels)


class StemCGL(nn.Module):
    def __init__(self, in_channels: int, cfg: DiscriminatorConfig):
        super().__init__()
        layers = []
        c = in_channels
        for width, stride in zip(cfg.stem_widths, cfg.stem_strides):
            layers += [nn.Conv2d(c, width, 3, stride=stride, padding=1),
                       _gn(width, cfg.gn_groups),
                       nn.LeakyReLU(cfg.leak)]
            c = width
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class HeadCLC(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(EMBED_DIM, cfg.head_hidden, 3, padding=1),
            nn.LeakyReLU(cfg.leak),
            nn.Conv2d(cfg.head_hidden, 1, 3, padding=1),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.body(y)


def resample_labels(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resampling for categorical maps. labels: N x H x W."""
    if labels.shape[-2:] == size:
        return labels
    f = labels.float().unsqueeze(1)
    return F.interpolate(f, size=size, mode="nearest").squeeze(1).long()


class LevelDiscriminator(nn.Module):
    def __init__(self, in_channels: int, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = StemCGL(in_channels, cfg)
        self.head = HeadCLC(cfg)
        if cfg.use_projection:
            self.embedding = nn.Embedding(cfg.n_classes, EMBED_DIM)
            with torch.no_grad():
                self.embedding.weight.uniform_(-0.1, 0.1)
        else:
            self.embedding = None

    def forward(self, features: torch.Tensor,
                labels: torch.Tensor | None = None) -> torch.Tensor:
        y = self.stem(features)
        z = self.head(y)
        if self.embedding is None or labels is None:
            return z
        lab = resample_labels(labels, y.shape[-2:])
        if int(lab.max()) >= self.cfg.n_classes or int(lab.min()) < 0:
            raise PaletteError(
                f"label id {int(lab.max())} outside palette of "
                f"{self.cfg.n_classes} classes")
        e = self.embedding(lab)                      # N x h x w x EMBED_DIM
        proj = (y * e.permute(0, 3, 1, 2)).sum(dim=1, keepdim=True)
        return z + proj


def score_level(features: torch.Tensor, labels: torch.Tensor | None,
                disc: LevelDiscriminator) -> torch.Tensor:
    """Realism score map for one perceptual level (unbounded reals)."""
    return disc(features, labels)


@dataclass
class DiscriminatorVerdict:
    scores: dict[int, torch.Tensor]          # level -> N x 1 x h x w
    accuracy: dict[int, float] = field(default_factory=dict)


class PerceptualEnsemble(nn.Module):
    """One LevelDiscriminator per backbone tap plus running accuracy
    estimates used by the training throttle."""

    def __init__(self, backbone: FrozenBackbone, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        self.backbone = backbone
        self.levels = nn.ModuleList([
            LevelDiscriminator(width, self.cfg) for width in backbone.config.widths
        ])
        self.register_buffer("running_accuracy",
                             torch.full((len(self.levels),), 0.5))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def score_image(self, image: torch.Tensor,
                    labels: torch.Tensor | None) -> DiscriminatorVerdict:
        """Apply the frozen backbone once, then every level net on its tap.
        Gradients never reach the backbone parameters (they are frozen)."""
        if image.min() < -1e-6 or image.max() > 1 + 1e-6:
            raise ValueError("discriminator input images must lie in [0, 1]")
        taps = self.backbone(image)
        scores = {k: self.levels[k](taps[k], labels) for k in range(self.n_levels)}
        acc = {k: float(self.running_accuracy[k]) for k in range(self.n_levels)}
        return DiscriminatorVerdict(scores=scores, accuracy=acc)

    def score_taps(self, taps: list[torch.Tensor],
                   labels: torch.Tensor | None) -> dict[int, torch.Tensor]:
        return {k: self.levels[k](taps[k], labels) for k in range(self.n_levels)}

    def update_accuracy_from(self, scores: dict[int, torch.Tensor],
                             truth_real: bool, decay: float = 0.99) -> None:
        for k, s in scores.items():
            r = float(self.running_accuracy[k])
            self.running_accuracy[k] = update_accuracy(s.detach(), truth_real, r, decay)


def update_accuracy(score_map: torch.Tensor, truth_real: bool, r: float,
                    decay: float = 0.99, threshold: float = 0.5) -> float:
    """EMA of per-pixel classification correctness. Scores above the L2-GAN
    midpoint (0.5 for targets {0, 1}) are read as 'real'."""
    preds_real = score_map > threshold
    correct = preds_real if truth_real else ~preds_real
    correctness = float(correct.float().mean())
    return decay * r + (1.0 - decay) * correctness


class PatchGANEnsemble(nn.Module):
    """Controlled-experiment baseline: the same stem/head on raw images at
    several scales, no label projection."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig(use_projection=False)
        if self.cfg.use_projection:
            raise ValueError("patchgan nets carry no projection")
        self.scales = self.cfg.patchgan_scales
        self.nets = nn.ModuleList(
            [LevelDiscriminator(3, self.cfg) for _ in self.scales])
        self.register_buffer("running_accuracy",
                             torch.full((len(self.nets),), 0.5))

    @property
    def n_levels(self) -> int:
        return len(self.nets)

    def score_image(self, image: torch.Tensor,
                    labels: torch.Tensor | None = None) -> DiscriminatorVerdict:
        scores = {}
        for k, (net, s) in enumerate(zip(self.nets, self.scales)):
            x = F.avg_pool2d(image, s) if s > 1 else image
            scores[k] = net(x, None)
        acc = {k: float(self.running_accuracy[k]) for k in range(self.n_levels)}
        return DiscriminatorVerdict(scores=scores, accuracy=acc)

    def update_accuracy_from(self, scores: dict[int, torch.Tensor],
                             truth_real: bool, decay: float = 0.99) -> None:
        for k, s in scores.items():
            r = float(self.running_accuracy[k])
            self.running_accuracy[k] = update_accuracy(s.detach(), truth_real, r, decay)


class GroundTruthLabels:
    """Label provider backed by the generator's perfect class maps.

    Consulted only for real images and unmodified rendered images, never for
    enhanced outputs.
    """

    def labels_for(self, sample) -> np.ndarray:
        return sample.labels

    def labels_for_image(self, image: np.ndarray, sample) -> np.ndarray:
        return sample.labels


def image_content_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()


class CachedLabelProvider:
    """File cache of class maps keyed by image content hash."""

    def __init__(self, cache_dir: str | Path, provider=None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.provider = provider or GroundTruthLabels()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.npy"

    def precompute(self, samples) -> int:
        """Compute and cache labels for every sample; returns count written."""
        written = 0
        for sample in samples:
            key = image_content_hash(sample.image)
            path = self._path(key)
            if not path.exists():
                np.save(path, self.provider.labels_for(sample))
                written += 1
        return written

    def labels_for(self, sample) -> np.ndarray:
        key = image_content_hash(sample.image)
        path = self._path(key)
        if path.exists():
            return np.load(path)
        labels = self.provider.labels_for(sample)
        np.save(path, labels)
        return labels
