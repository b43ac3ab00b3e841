"""Relativistic video discriminator over consecutive LAB frame pairs."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

FULL_WIDTHS = (64, 64, 128, 256, 512, 1024)
DIVISOR = 64


class SelfAttention(nn.Module):
    """Non-local attention with a learned residual gate initialized to 0."""

    def __init__(self, c):
        super().__init__()
        k = max(1, c // 8)
        self.query = spectral_norm(nn.Conv2d(c, k, 1))
        self.key = spectral_norm(nn.Conv2d(c, k, 1))
        self.value = spectral_norm(nn.Conv2d(c, c, 1))
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2).transpose(1, 2)
        v = self.value(x).flatten(2).transpose(1, 2)
        # unscaled dot-product attention, fused so the (hw)^2 matrix is never stored
        out = F.scaled_dot_product_attention(q, k, v, scale=1.0)
        return x + self.gamma * out.transpose(1, 2).reshape(n, c, h, w)

    def reference_forward(self, x):
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2)
        attn = torch.softmax(torch.bmm(q, k), dim=-1)
        v = self.value(x).flatten(2)
        out = torch.bmm(v, attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gamma * out


class Discriminator(nn.Module):
    """Six stride-2 k4 convs (attention after the first), k3 conv to 1 channel, average pool."""

    def __init__(self, in_channels: int = 6, width_scale: float = 1.0):
        super().__init__()
        widths = [max(1, int(round(c * width_scale))) for c in FULL_WIDTHS]
        self.convs = nn.ModuleList()
        cin = in_channels
        for c in widths:
            self.convs.append(spectral_norm(nn.Conv2d(cin, c, 4, stride=2, padding=1)))
            cin = c
        self.attention = SelfAttention(widths[0])
        self.head = spectral_norm(nn.Conv2d(cin, 1, 3, padding=1))

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        """Score (N, 6, H, W) frame pairs; returns (N,)."""
        h, w = pairs.shape[-2:]
        if h % DIVISOR or w % DIVISOR:
            raise ValueError(f"discriminator input {h}x{w} must be divisible by {DIVISOR}")
        x = pairs
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            if i == 0:
                x = self.attention(x)
        return self.head(x).mean(dim=(1, 2, 3))


def frame_pairs(prev_lab: torch.Tensor, cur_lab: torch.Tensor) -> torch.Tensor:
    return torch.cat([prev_lab, cur_lab], dim=1)


def pad_to_multiple(x: torch.Tensor, divisor: int = DIVISOR) -> torch.Tensor:
    """Replicate-pad H and W up to the next multiple of ``divisor``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if not (ph or pw):
        return x
    return F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")


def discriminate(net: Discriminator, pairs: torch.Tensor) -> torch.Tensor:
    return net(pairs)
