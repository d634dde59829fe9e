"""Convolutional backbones and the lateral-sum upsampling decoder."""

from __future__ import annotations

import torch.nn.functional as F
from torch import nn


def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _dw_bn(channels):
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=False),
        nn.BatchNorm2d(channels),
        nn.ReLU(inplace=True),
    )


class SmallCNN(nn.Module):
    """Four stride-2 stages; returns every stage's feature map."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        stages = []
        cin = in_channels
        for w in widths:
            stages.append(nn.Sequential(_conv_bn(cin, w, 2), _conv_bn(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)
        self.strides = tuple(2 ** (i + 1) for i in range(len(widths)))

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet18(nn.Module):
    """torchvision ResNet-18 trunk (random init) exposing its four stages."""

    widths = (64, 128, 256, 512)
    strides = (4, 8, 16, 32)

    def __init__(self, in_channels: int = 3):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def make_backbone(kind: str, in_channels: int, widths) -> nn.Module:
    if kind == "resnet18":
        return ResNet18(in_channels)
    return SmallCNN(in_channels, widths)


class PixelDecoder(nn.Module):
    """Upsample the deepest map step by step, adding 1x1 laterals of the
    matching backbone stages, until the requested resolution is reached.

    Only the stages that the upsampling path visits get a lateral, so every
    parameter receives gradient.
    """

    def __init__(self, widths, strides, channels: int, out_size: int, in_size: int):
        super().__init__()
        self.out_size = out_size
        res = [-(-in_size // s) for s in strides]
        levels = [len(widths) - 1]
        while levels[-1] > 0 and res[levels[-1]] < out_size:
            levels.append(levels[-1] - 1)
        self.levels = tuple(levels)  # deepest first
        self.laterals = nn.ModuleList(nn.Conv2d(widths[i], channels, 1) for i in levels)
        # depthwise smoothing keeps the 28x28 levels cheap on CPU
        self.smooth = nn.ModuleList(_dw_bn(channels) for _ in levels[1:])

    def forward(self, feats):
        x = self.laterals[0](feats[self.levels[0]])
        for lateral, smooth, i in zip(self.laterals[1:], self.smooth, self.levels[1:]):
            lat = lateral(feats[i])
            x = smooth(F.interpolate(x, size=lat.shape[-2:], mode="nearest") + lat)
        if x.shape[-1] != self.out_size or x.shape[-2] != self.out_size:
            x = F.interpolate(x, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        return x


class SceneEncoder(nn.Module):
    """Shared backbone + decoder over the three crops, concatenated."""

    def __init__(self, cfg, out_size: int):
        super().__init__()
        self.backbone = make_backbone(cfg.backbone, 3, cfg.backbone_widths)
        self.decoder = PixelDecoder(self.backbone.widths, self.backbone.strides, cfg.channels, out_size, cfg.input_size)

    def forward(self, crops):
        """``crops``: (B, 3, 3, S, S) -> (B, 3C, out, out)."""
        b = crops.shape[0]
        x = crops.reshape(b * 3, *crops.shape[2:]) - 0.5
        maps = self.decoder(self.backbone(x))
        return maps.reshape(b, 3 * maps.shape[1], *maps.shape[-2:])
