"""Convolutional block attention: channel gating followed by spatial gating.

Both gates produce weights strictly inside (0, 1) for finite inputs, so
applying them attenuates features without changing their sign.
"""

import torch
import torch.nn.functional as F
from torch import nn


def _fitting_reduction(channels: int, reduction: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``reduction``."""
    r = min(reduction, channels)
    while channels % r != 0:
        r -= 1
    return r


class ChannelGate(nn.Module):
    """Per-channel attention weights from pooled spatial context.

    A shared two-layer perceptron (C -> C/r -> C) is applied to the
    spatially average-pooled and max-pooled descriptors; the sigmoid of the
    summed outputs is the per-channel weight.
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channels = channels
        self.reduction = _fitting_reduction(channels, reduction)
        hidden = channels // self.reduction
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=False)
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, x):
        """Return (N, C, 1, 1) attention weights in (0, 1)."""
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(avg))) + self.fc2(F.relu(self.fc1(mx))))


class SpatialGate(nn.Module):
    """Per-position attention weights from channel-pooled context.

    The channel-wise mean and max maps are stacked and convolved with a
    single 7x7 kernel (padding 3, so resolution is preserved).
    """

    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        """Return (N, 1, H, W) attention weights in (0, 1)."""
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Channel gate then spatial gate, each applied multiplicatively."""

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        self.channel_gate = ChannelGate(channels, reduction)
        self.spatial_gate = SpatialGate(kernel_size)

    def forward(self, x):
        x = x * self.channel_gate(x)
        x = x * self.spatial_gate(x)
        return x
