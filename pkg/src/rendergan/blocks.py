"""Spectrally normalized convolutions and the residual block used by the
G-buffer encoder and the modulation modules.

The residual block follows a fixed recipe: two 3x3 convolutions with spectral
weight normalization and a ReLU between them. The skip path is the identity
unless the channel count or resolution changes, in which case it is a
spectrally normalized 1x1 projection. There is no activation after the sum,
so a zero-initialized main branch makes the block an exact identity.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


class SNConv2d(nn.Conv2d):
    """Conv2d whose weight is divided by its largest singular value.

    The singular value is estimated by power iteration on the unrolled
    (out_channels, in_channels * kh * kw) weight matrix. One iteration runs
    per training-mode forward; `converge_power_iteration` refines the
    estimate in place for analysis or tests.
    """

    def __init__(self, *args, n_power_iterations: int = 1, eps: float = 1e-12, **kwargs):
        super().__init__(*args, **kwargs)
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        w = self.weight.detach().reshape(self.out_channels, -1)
        self.register_buffer("_u", F.normalize(torch.randn(w.shape[0], dtype=w.dtype), dim=0, eps=eps))
        self.register_buffer("_v", F.normalize(torch.randn(w.shape[1], dtype=w.dtype), dim=0, eps=eps))
        # Align u and v with the weight once so sigma is non-negative from the start.
        self._power_iteration(1)

    @torch.no_grad()
    def _power_iteration(self, steps: int) -> None:
        w = self.weight.reshape(self.out_channels, -1)
        for _ in range(steps):
            self._v = F.normalize(w.t().mv(self._u), dim=0, eps=self.eps)
            self._u = F.normalize(w.mv(self._v), dim=0, eps=self.eps)

    @torch.no_grad()
    def converge_power_iteration(self, tol: float = 1e-10, max_steps: int = 500) -> float:
        """Iterate until the u vector stabilizes; returns the estimate."""
        for _ in range(max_steps):
            prev = self._u.clone()
            self._power_iteration(1)
            if torch.max(torch.abs(self._u - prev)) < tol:
                break
        return float(self.spectral_sigma())

    def spectral_sigma(self) -> torch.Tensor:
        w = self.weight.reshape(self.out_channels, -1)
        return torch.dot(self._u, w.mv(self._v))

    def normalized_weight(self) -> torch.Tensor:
        # The clamp only matters for an all-zero weight (0 / eps stays 0).
        return self.weight / self.spectral_sigma().clamp_min(self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            self._power_iteration(self.n_power_iterations)
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class ResidualBlock(nn.Module):
    """Two SN 3x3 convolutions with a ReLU in between, plus a skip path.

    stride must be 1 or 2; the first convolution carries the stride and any
    channel change. The 1x1 projection on the skip path exists only when
    shape changes make the identity impossible.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ShapeError(f"residual block stride must be 1 or 2, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = SNConv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, stride=1, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.proj = SNConv2d(in_channels, out_channels, 1, stride=stride, padding=0)
        else:
            self.proj = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"residual block expects {self.in_channels} channels, got {x.shape[1]}"
            )
        h = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return h + skip

    def zero_init_main_branch(self) -> None:
        """Zero the main-branch weights so the block computes the identity
        (valid only when the skip path is the identity)."""
        with torch.no_grad():
            self.conv1.weight.zero_()
            self.conv1.bias.zero_()
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()


def clamp_unit_interval(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, 0.0, 1.0)
