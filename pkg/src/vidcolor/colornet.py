"""Colorization subnet: U-Net style encoder/decoder predicting chrominance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .colorio import LabFrame

FULL_WIDTHS = (64, 128, 256, 512)
# tanh saturates to exactly +-1 in float32; keep the output strictly inside
_OUT_SCALE = 1.0 - 1e-6


@dataclass
class ColorNetInput:
    """All four inputs at full resolution, (N, C, H, W) tensors."""

    x_l: torch.Tensor
    warped_ab: torch.Tensor
    confidence: torch.Tensor
    prev_lab: torch.Tensor

    def __post_init__(self):
        size = self.x_l.shape[-2:]
        for name in ("warped_ab", "confidence", "prev_lab"):
            t = getattr(self, name)
            if t.shape[-2:] != size or t.shape[0] != self.x_l.shape[0]:
                raise ValueError(f"{name} has shape {tuple(t.shape)}, expected batch/size of x_l {tuple(self.x_l.shape)}")

    @classmethod
    def build(cls, x_l, warped_small, conf_small, prev_lab) -> "ColorNetInput":
        """Bilinearly upsample the H/4 correspondence outputs to the frame size."""
        size = x_l.shape[-2:]
        up = lambda t: F.interpolate(t, size=size, mode="bilinear", align_corners=False)  # noqa: E731
        return cls(x_l, up(warped_small), up(conf_small), prev_lab)

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.x_l, self.warped_ab, self.confidence, self.prev_lab], dim=1)


def _conv(cin, cout, stride=1):
    return spectral_norm(nn.Conv2d(cin, cout, 3, stride=stride, padding=1))


class EncoderBlock(nn.Module):
    def __init__(self, cin, cout, n_convs):
        super().__init__()
        layers = []
        for k in range(n_convs):
            stride = 2 if k == n_convs - 1 else 1
            layers += [_conv(cin if k == 0 else cout, cout, stride), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        return self.norm(self.body(x))


class BottleneckBlock(nn.Module):
    """Three convs with a local skip connection."""

    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            _conv(c, c), nn.ReLU(inplace=True), _conv(c, c), nn.ReLU(inplace=True), _conv(c, c)
        )
        self.norm = nn.InstanceNorm2d(c, affine=True)

    def forward(self, x):
        return self.norm(F.relu(x + self.body(x)))


class DecoderBlock(nn.Module):
    """Convs at the incoming resolution, nearest upsample, final conv."""

    def __init__(self, cin, cout, n_convs):
        super().__init__()
        layers = []
        for k in range(n_convs - 1):
            layers += [_conv(cin if k == 0 else cout, cout), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.post = _conv(cout, cout)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x, size):
        x = F.interpolate(self.body(x), size=size, mode="nearest")
        return self.norm(F.relu(self.post(x)))


class ColorNet(nn.Module):
    """Predicts ab in (-1, 1) from luminance, warped color, confidence and the previous frame."""

    in_channels = 7

    def __init__(self, width_scale: float = 1.0):
        super().__init__()
        c1, c2, c3, c4 = (max(1, int(round(c * width_scale))) for c in FULL_WIDTHS)
        self.width_scale = width_scale
        self.enc1 = EncoderBlock(self.in_channels, c1, 2)
        self.enc2 = EncoderBlock(c1, c2, 2)
        self.enc3 = EncoderBlock(c2, c3, 3)
        self.proj = nn.Sequential(_conv(c3, c4), nn.ReLU(inplace=True))
        self.bottleneck = nn.Sequential(BottleneckBlock(c4), BottleneckBlock(c4), BottleneckBlock(c4))
        self.dec7 = DecoderBlock(c4 + c3, c3, 3)
        self.dec8 = DecoderBlock(c3 + c2, c2, 2)
        self.dec9 = DecoderBlock(c2 + c1, c1, 2)
        self.out = _conv(c1, 2)

    def forward(self, inp: ColorNetInput | torch.Tensor) -> torch.Tensor:
        x = inp.stacked() if isinstance(inp, ColorNetInput) else inp
        if x.shape[1] != self.in_channels:
            raise ValueError(f"ColorNet expects {self.in_channels} input channels, got {x.shape[1]}")
        size = x.shape[-2:]
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        b = self.bottleneck(self.proj(e3))
        d7 = self.dec7(torch.cat([b, e3], 1), e2.shape[-2:])
        d8 = self.dec8(torch.cat([d7, e2], 1), e1.shape[-2:])
        d9 = self.dec9(torch.cat([d8, e1], 1), size)
        return torch.tanh(self.out(d9)) * _OUT_SCALE


def colorize_frame(net: ColorNet, inp: ColorNetInput) -> torch.Tensor:
    """Predicted chrominance, (N, 2, H, W)."""
    return net(inp)


def compose_frame(x_l, ab) -> LabFrame:
    """Join a luminance plane (H, W) with chrominance (H, W, 2) into a LabFrame."""
    if isinstance(x_l, torch.Tensor):
        x_l = x_l.detach().double().cpu().numpy().reshape(x_l.shape[-2:])
    if isinstance(ab, torch.Tensor):
        ab = ab.detach().double().cpu().numpy()
        ab = ab.reshape(2, *ab.shape[-2:]).transpose(1, 2, 0)
    return LabFrame(np.asarray(x_l), np.asarray(ab))


def zero_prev(x_l: torch.Tensor) -> torch.Tensor:
    """Neutral previous frame (x_l, 0, 0) used at t = 0."""
    return torch.cat([x_l, torch.zeros_like(x_l).expand(-1, 2, -1, -1)], dim=1)
