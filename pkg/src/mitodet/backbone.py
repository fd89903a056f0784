"""Residual feature extractor and feature pyramid.

A 50-layer bottleneck residual network in which every convolution kernel is
weight-standardized and every normalization is a group norm, with a block
attention module appended to each stage. The pyramid lifts stages C3..C5 to
five 256-channel levels P3..P7 (strides 8..128).

A width multiplier and per-stage block-count override exist so small
variants can be trained and gradient-checked quickly; the default
configuration is the full 50-layer network.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CBAM
from .normalization import GroupNorm2d, WSConv2d

# bottleneck widths per stage; stage outputs are 4x these
_STAGE_WIDTHS = (64, 128, 256, 512)


@dataclass
class BackboneConfig:
    stage_blocks: tuple = (3, 4, 6, 3)
    width_multiplier: float = 1.0
    gn_groups: int | None = None  # None: 32 when divisible, else per-channel
    cbam: bool = True
    cbam_reduction: int = 16
    zero_init_residual: bool = False
    fpn_channels: int = 256

    def stage_channels(self):
        """Output channel counts of stages C2..C5 after the width multiplier."""
        return tuple(4 * max(1, round(w * self.width_multiplier)) for w in _STAGE_WIDTHS)


def _conv3x3(cin, cout, stride=1):
    return WSConv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def _conv1x1(cin, cout, stride=1):
    return WSConv2d(cin, cout, 1, stride=stride, bias=False)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand residual block with group norms."""

    expansion = 4

    def __init__(self, cin, width, stride=1, gn_groups=None):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = _conv1x1(cin, width)
        self.gn1 = GroupNorm2d(width, gn_groups)
        self.conv2 = _conv3x3(width, width, stride)
        self.gn2 = GroupNorm2d(width, gn_groups)
        self.conv3 = _conv1x1(width, cout)
        self.gn3 = GroupNorm2d(cout, gn_groups)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(_conv1x1(cin, cout, stride), GroupNorm2d(cout, gn_groups))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.gn1(self.conv1(x)))
        out = F.relu(self.gn2(self.conv2(out)))
        out = self.gn3(self.conv3(out))
        return F.relu(out + identity)


class ResNetBackbone(nn.Module):
    """Stem plus four bottleneck stages, yielding maps C2..C5 at strides 4..32."""

    def __init__(self, cfg: BackboneConfig = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        g = cfg.gn_groups
        stem_width = max(1, round(64 * cfg.width_multiplier))
        self.conv1 = WSConv2d(3, stem_width, 7, stride=2, padding=3, bias=False)
        self.gn1 = GroupNorm2d(stem_width, g)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        self.stages = nn.ModuleList()
        self.attention = nn.ModuleList()
        cin = stem_width
        for i, (base_width, blocks) in enumerate(zip(_STAGE_WIDTHS, cfg.stage_blocks)):
            width = max(1, round(base_width * cfg.width_multiplier))
            stride = 1 if i == 0 else 2
            layers = [Bottleneck(cin, width, stride, g)]
            cin = width * Bottleneck.expansion
            for _ in range(blocks - 1):
                layers.append(Bottleneck(cin, width, 1, g))
            self.stages.append(nn.Sequential(*layers))
            self.attention.append(CBAM(cin, cfg.cbam_reduction) if cfg.cbam else nn.Identity())

        if cfg.zero_init_residual:
            for m in self.modules():
                if isinstance(m, Bottleneck):
                    nn.init.zeros_(m.gn3.gamma)

    def forward(self, images):
        """Return the stage maps {"c2": ..., "c5": ...} for a (N, 3, H, W) batch.

        H and W must be divisible by 32 so every stage and pyramid level has
        exact stride arithmetic.
        """
        h, w = images.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input size {h}x{w} is not divisible by 32; pad before calling")
        x = self.maxpool(F.relu(self.gn1(self.conv1(images))))
        out = {}
        for i, (stage, attn) in enumerate(zip(self.stages, self.attention)):
            x = attn(stage(x))
            out[f"c{i + 2}"] = x
        return out


class FeaturePyramid(nn.Module):
    """Top-down fusion of C3..C5 into levels P3..P7 with a common width.

    Lateral 1x1 projections are summed with the 2x nearest-neighbor
    upsampled coarser level; each merged level gets a 3x3 smoothing
    convolution. P6 is a stride-2 convolution on C5 and P7 a stride-2
    convolution on the activated P6. These projections are plain
    convolutions: weight standardization is paired with the group norms in
    the residual body, and standardizing an unnormalized projection would
    blow up its output scale by the kernel fan-in.
    """

    def __init__(self, c3, c4, c5, out_channels=256):
        super().__init__()
        self.out_channels = out_channels
        self.lateral3 = nn.Conv2d(c3, out_channels, 1)
        self.lateral4 = nn.Conv2d(c4, out_channels, 1)
        self.lateral5 = nn.Conv2d(c5, out_channels, 1)
        self.smooth3 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.smooth4 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.smooth5 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.conv6 = nn.Conv2d(c5, out_channels, 3, stride=2, padding=1)
        self.conv7 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, c3, c4, c5):
        """Return an ordered {level: map} dict for levels 3..7."""
        m5 = self.lateral5(c5)
        m4 = self.lateral4(c4) + F.interpolate(m5, scale_factor=2, mode="nearest")
        m3 = self.lateral3(c3) + F.interpolate(m4, scale_factor=2, mode="nearest")
        p6 = self.conv6(c5)
        p7 = self.conv7(F.relu(p6))
        return {3: self.smooth3(m3), 4: self.smooth4(m4), 5: self.smooth5(m5), 6: p6, 7: p7}


class PyramidBackbone(nn.Module):
    """Backbone and pyramid chained: images in, {level: 256-channel map} out."""

    def __init__(self, cfg: BackboneConfig = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        self.body = ResNetBackbone(cfg)
        _, c3, c4, c5 = cfg.stage_channels()
        self.fpn = FeaturePyramid(c3, c4, c5, cfg.fpn_channels)

    def forward(self, images):
        stages = self.body(images)
        return self.fpn(stages["c3"], stages["c4"], stages["c5"])
