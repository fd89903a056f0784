"""Group normalization and weight standardization primitives.

Micro-batch friendly replacements for batch statistics: activations are
normalized per sample within channel groups, and convolution kernels are
standardized over their fan-in before every use. Both use the unbiased
(sample) variance.
"""

import torch
import torch.nn.functional as F
from torch import nn


def default_group_count(channels: int) -> int:
    """Group count rule: 32 groups when the channel count allows it,
    otherwise one group per channel."""
    if channels >= 32 and channels % 32 == 0:
        return 32
    return channels


def group_normalize(x, gamma, beta, groups, eps=1e-5, validate=True):
    """Normalize a (N, C, H, W) feature map per sample within channel groups.

    Each of the ``groups`` channel groups is reduced over its C/groups
    channels and all spatial positions; the normalized result is scaled and
    shifted per channel by ``gamma`` and ``beta``.

    Raises ValueError when C is not divisible by ``groups``, when the affine
    parameters do not match C, or when the input contains non-finite values.
    """
    if x.dim() != 4:
        raise ValueError(f"expected a (N, C, H, W) input, got shape {tuple(x.shape)}")
    n, c, h, w = x.shape
    gamma = torch.as_tensor(gamma, dtype=x.dtype, device=x.device)
    beta = torch.as_tensor(beta, dtype=x.dtype, device=x.device)
    if validate:
        if c % groups != 0:
            raise ValueError(f"channel count {c} is not divisible by {groups} groups")
        if gamma.numel() != c or beta.numel() != c:
            raise ValueError(
                f"affine parameters of length {gamma.numel()}/{beta.numel()} "
                f"do not match {c} channels"
            )
        if not torch.isfinite(x).all():
            raise ValueError("input feature map contains non-finite values")

    xg = x.reshape(n, groups, c // groups, h, w)
    mean = xg.mean(dim=(2, 3, 4), keepdim=True)
    var = xg.var(dim=(2, 3, 4), unbiased=True, keepdim=True)
    xg = (xg - mean) / torch.sqrt(var + eps)
    out = xg.reshape(n, c, h, w)
    return out * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def weight_standardize(weight, eps=1e-5, validate=True):
    """Standardize a (C_out, C_in, k, k) kernel bank per output channel.

    Every output channel's fan-in slice (C_in * k * k entries) is shifted to
    zero mean and scaled to unit sample variance (up to ``eps``). Shape is
    preserved.
    """
    if weight.dim() != 4:
        raise ValueError(f"expected a (C_out, C_in, k, k) kernel, got shape {tuple(weight.shape)}")
    if validate and not torch.isfinite(weight).all():
        raise ValueError("kernel contains non-finite values")
    mean = weight.mean(dim=(1, 2, 3), keepdim=True)
    var = weight.var(dim=(1, 2, 3), unbiased=True, keepdim=True)
    return (weight - mean) / torch.sqrt(var + eps)


class GroupNorm2d(nn.Module):
    """Learnable group normalization layer for (N, C, H, W) maps.

    Unlike ``nn.GroupNorm`` this uses the unbiased variance, matching
    :func:`group_normalize`.
    """

    def __init__(self, channels, groups=None, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.groups = default_group_count(channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ValueError(f"channel count {channels} is not divisible by {self.groups} groups")
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_normalize(x, self.gamma, self.beta, self.groups, self.eps, validate=False)

    def extra_repr(self):
        return f"{self.channels}, groups={self.groups}, eps={self.eps}"


class WSConv2d(nn.Conv2d):
    """Conv2d whose kernel is standardized per output channel on every forward."""

    def __init__(self, *args, ws_eps=1e-5, **kwargs):
        super().__init__(*args, **kwargs)
        self.ws_eps = ws_eps

    def forward(self, x):
        weight = weight_standardize(self.weight, self.ws_eps, validate=False)
        return self._conv_forward(x, weight, self.bias)
