"""Correspondence subnet: fused features, correlation matrix, color warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import LEVELS, Backbone, FeaturePyramid, gray_to_rgb
from .colorio import LabFrame, lab_tensor_to_rgb

TAU = 0.01
# rows of the input grid processed per matmul tile in ``correlate``
CORRELATION_TILE = 512
_NORM_EPS = 1e-8


@dataclass
class WarpResult:
    """Warped reference chrominance (h, w, 2) and confidence (h, w) on the H/4 grid."""

    warped_ab: np.ndarray
    confidence: np.ndarray


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.ReflectionPad2d(1),
        nn.Conv2d(cin, cout, 3, stride=stride),
        nn.InstanceNorm2d(cout, affine=True),
        nn.PReLU(cout),
    )


class UpConv(nn.Module):
    """Bilinear resize to an explicit size, then a conv block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.block = conv_block(cin, cout)

    def forward(self, x, size):
        return self.block(F.interpolate(x, size=size, mode="bilinear", align_corners=False))


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(c, c, 3),
            nn.InstanceNorm2d(c, affine=True),
            nn.PReLU(c),
            nn.ReflectionPad2d(1),
            nn.Conv2d(c, c, 3),
            nn.InstanceNorm2d(c, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class CorrespondenceNet(nn.Module):
    """Adapts the four pyramid levels to the H/4 grid and fuses them.

    The same parameters process the input frame and the reference.
    """

    def __init__(self, level_channels: dict, width: int = 256, n_res: int = 4, tau: float = TAU):
        super().__init__()
        half = width // 2
        c2, c3, c4, c5 = (level_channels[lvl] for lvl in LEVELS)
        self.width = width
        self.tau = tau
        self.l2 = nn.Sequential(conv_block(c2, half), conv_block(half, width, stride=2))
        self.l3 = nn.Sequential(conv_block(c3, half), conv_block(half, width))
        self.l4_conv = conv_block(c4, width)
        self.l4_up = UpConv(width, width)
        self.l5_up1 = UpConv(c5, width)
        self.l5_up2 = UpConv(width, width)
        self.merge = conv_block(4 * width, width)
        self.resblocks = nn.Sequential(*[ResBlock(width) for _ in range(n_res)])

    def fuse_features(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Return the fused (N, width, H/4, W/4) feature grid."""
        for lvl in LEVELS:
            if lvl not in pyramid.levels:
                raise ValueError(f"pyramid level {lvl} missing")
        size = tuple(pyramid[3].shape[-2:])
        f2 = self.l2(pyramid[2])
        if tuple(f2.shape[-2:]) != size:
            f2 = F.interpolate(f2, size=size, mode="bilinear", align_corners=False)
        f3 = self.l3(pyramid[3])
        f4 = self.l4_up(self.l4_conv(pyramid[4]), size)
        f5 = self.l5_up2(self.l5_up1(pyramid[5], tuple(pyramid[4].shape[-2:])), size)
        return self.resblocks(self.merge(torch.cat([f2, f3, f4, f5], dim=1)))

    def forward(self, x_pyr: FeaturePyramid, ref_pyr: FeaturePyramid, ref_ab: torch.Tensor):
        """Warp ``ref_ab`` (N, 2, H, W) onto the input grid.

        Returns ``(warped_ab, confidence)`` shaped (N, 2, h, w) and (N, 1, h, w).
        """
        return self.match(self.fuse_features(x_pyr), self.fuse_features(ref_pyr), ref_ab)

    def match(self, fx: torch.Tensor, fy: torch.Tensor, ref_ab: torch.Tensor):
        """Correlate fused grids and warp; lets callers reuse a reference grid."""
        m = correlate(fx, fy)
        ref_small = F.adaptive_avg_pool2d(ref_ab, fy.shape[-2:])
        n, _, h, w = fx.shape
        warped = warp_colors(m, ref_small, self.tau)
        warped = warped.transpose(1, 2).reshape(n, 2, h, w)
        conf = confidence(m).reshape(n, 1, h, w)
        return warped, conf


def _flatten(f: torch.Tensor) -> torch.Tensor:
    # (N, C, h, w) -> (N, h*w, C), row-major positions
    return f.flatten(2).transpose(1, 2)


def _center_normalize(rows: torch.Tensor) -> torch.Tensor:
    rows = rows - rows.mean(dim=1, keepdim=True)
    return rows / rows.norm(dim=2, keepdim=True).clamp_min(_NORM_EPS)


def correlate(fx: torch.Tensor, fy: torch.Tensor, tile: int = CORRELATION_TILE) -> torch.Tensor:
    """Mean-centered cosine similarity between every input and reference position.

    ``fx`` and ``fy`` are (N, C, h, w) grids (or already flattened (N, P, C)).
    Returns (N, P_x, P_y) with entries in [-1, 1]. Rows are computed in tiles of
    ``tile`` input positions. Zero-variance positions get similarity 0.
    """
    x = _flatten(fx) if fx.dim() == 4 else fx
    y = _flatten(fy) if fy.dim() == 4 else fy
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"channel mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    xn = _center_normalize(x)
    yt = _center_normalize(y).transpose(1, 2)
    tiles = [torch.bmm(xn[:, r : r + tile], yt) for r in range(0, xn.shape[1], tile)]
    return torch.cat(tiles, dim=1).clamp(-1.0, 1.0)


def correlate_reference(fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Scalar double-loop correlation for one pair of (P, C) feature arrays."""
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    px, c = fx.shape
    py = fy.shape[0]
    mx = [sum(fx[i][k] for i in range(px)) / px for k in range(c)]
    my = [sum(fy[j][k] for j in range(py)) / py for k in range(c)]
    xs = [[float(fx[i][k]) - mx[k] for k in range(c)] for i in range(px)]
    ys = [[float(fy[j][k]) - my[k] for k in range(c)] for j in range(py)]
    nx = [sum(v * v for v in row) ** 0.5 for row in xs]
    ny = [sum(v * v for v in row) ** 0.5 for row in ys]
    out = np.zeros((px, py))
    for i in range(px):
        xi = xs[i]
        for j in range(py):
            if nx[i] == 0.0 or ny[j] == 0.0:
                continue
            yj = ys[j]
            dot = 0.0
            for k in range(c):
                dot += xi[k] * yj[k]
            out[i, j] = dot / (nx[i] * ny[j])
    return out


def warp_colors(m: torch.Tensor, ref_ab: torch.Tensor, tau: float = TAU) -> torch.Tensor:
    """Softmax(m / tau)-weighted average of reference colors.

    ``m`` is (N, P, Q); ``ref_ab`` is (N, 2, h, w) with h*w == Q, or (N, Q, 2).
    Returns (N, P, 2).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    ref = _flatten(ref_ab) if ref_ab.dim() == 4 else ref_ab
    if ref.shape[1] != m.shape[-1]:
        raise ValueError(f"reference has {ref.shape[1]} positions, matrix has {m.shape[-1]} columns")
    z = m / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    weights = e / e.sum(dim=-1, keepdim=True)
    return torch.bmm(weights, ref)


def confidence(m: torch.Tensor) -> torch.Tensor:
    """Row maximum of the correlation matrix, (N, P)."""
    return m.max(dim=-1).values


def fit_reference(ref: torch.Tensor, size) -> torch.Tensor:
    """Aspect-preserving resize then center crop of an (N, C, H, W) tensor to ``size``."""
    h, w = ref.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return ref
    scale = max(th / h, tw / w)
    nh, nw = max(th, int(np.ceil(h * scale - 1e-9))), max(tw, int(np.ceil(w * scale - 1e-9)))
    out = F.interpolate(ref, size=(nh, nw), mode="bilinear", align_corners=False, antialias=scale < 1)
    top, left = (nh - th) // 2, (nw - tw) // 2
    out = out[..., top : top + th, left : left + tw]
    if tuple(out.shape[-2:]) != (th, tw):
        raise ValueError(f"reference resize produced {tuple(out.shape[-2:])}, expected {(th, tw)}")
    return out


def reference_rgb(ref_lab: torch.Tensor, use_color: bool = True) -> torch.Tensor:
    """Backbone input for a reference: full-color render, or replicated luminance."""
    return lab_tensor_to_rgb(ref_lab) if use_color else gray_to_rgb(ref_lab[:, :1])


def align_reference(net: CorrespondenceNet, backbone: Backbone, x: LabFrame, y: LabFrame,
                    reference_color_features: bool = True) -> WarpResult:
    """Run extract -> fuse -> correlate -> warp/confidence for one frame pair."""
    dtype = next(net.parameters()).dtype
    x_t = x.to_tensor(dtype)
    y_t = fit_reference(y.to_tensor(dtype), x.shape)
    with torch.no_grad():
        x_pyr = backbone(gray_to_rgb(x_t[:, :1]))
        y_pyr = backbone(reference_rgb(y_t, reference_color_features))
        warped, conf = net(x_pyr, y_pyr, y_t[:, 1:])
    return WarpResult(
        warped[0].permute(1, 2, 0).double().numpy(),
        conf[0, 0].double().numpy(),
    )
