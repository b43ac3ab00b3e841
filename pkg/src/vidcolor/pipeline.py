"""Recurrent frame-by-frame colorization with a fixed exemplar."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, FeaturePyramid, gray_to_rgb, make_backbone, perturb_features
from .colorio import LabFrame, VideoClip
from .colornet import ColorNet, ColorNetInput, zero_prev
from .correspondence import CorrespondenceNet, fit_reference, reference_rgb

log = logging.getLogger(__name__)

TILE_OVERLAP = 32
DEFAULT_MEMORY_BUDGET = 512 * 2**20  # bytes for one float32 correlation matrix


@dataclass
class ReferenceEncoding:
    grid: torch.Tensor  # fused reference features (N, C, h, w)
    ab: torch.Tensor  # reference chrominance at frame size (N, 2, H, W)


class VideoColorizer(nn.Module):
    """Backbone + correspondence subnet + colorization subnet."""

    def __init__(self, backbone: Backbone, correspondence: CorrespondenceNet, colornet: ColorNet,
                 reference_color_features: bool = True):
        super().__init__()
        self.backbone = backbone
        self.correspondence = correspondence
        self.colornet = colornet
        self.reference_color_features = reference_color_features

    @classmethod
    def build(cls, backbone: str | Backbone = "toy", width_scale: float = 1.0, seed: int = 0,
              backbone_path=None, reference_color_features: bool = True) -> "VideoColorizer":
        torch.manual_seed(seed)
        bb = backbone if isinstance(backbone, Backbone) else make_backbone(backbone, backbone_path, seed)
        corr = CorrespondenceNet(bb.level_channels, width=max(8, int(round(256 * width_scale))))
        col = ColorNet(width_scale)
        return cls(bb, corr, col, reference_color_features)

    def trainable_parameters(self):
        return list(self.correspondence.parameters()) + list(self.colornet.parameters())

    def encode_reference(self, ref_lab: torch.Tensor, size=None, feature_noise: float = 0.0,
                         generator: torch.Generator | None = None) -> ReferenceEncoding:
        if size is not None:
            ref_lab = fit_reference(ref_lab, size)
        pyr = self.backbone(reference_rgb(ref_lab, self.reference_color_features))
        if feature_noise > 0:
            pyr = perturb_features(pyr, feature_noise, generator)
        return ReferenceEncoding(self.correspondence.fuse_features(pyr), ref_lab[:, 1:])

    def input_pyramid(self, x_l: torch.Tensor) -> FeaturePyramid:
        return self.backbone(gray_to_rgb(x_l))

    def frame_step(self, x_l: torch.Tensor, ref: ReferenceEncoding, prev_lab: torch.Tensor | None):
        """Colorize one frame. Returns ``(ab, warped_small, confidence_small)``."""
        fx = self.correspondence.fuse_features(self.input_pyramid(x_l))
        warped, conf = self.correspondence.match(fx, ref.grid, ref.ab)
        if prev_lab is None:
            prev_lab = zero_prev(x_l)
        ab = self.colornet(ColorNetInput.build(x_l, warped, conf, prev_lab))
        return ab, warped, conf

    def forward(self, x_l, ref_lab, prev_lab=None):
        ref = self.encode_reference(ref_lab, size=x_l.shape[-2:])
        return self.frame_step(x_l, ref, prev_lab)[0]


def _tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    if tile >= length:
        return [0]
    step = tile - overlap
    starts = list(range(0, length - tile, step))
    starts.append(length - tile)
    return starts


def tile_grid(height: int, width: int, memory_budget: int, overlap: int = TILE_OVERLAP):
    """Tile boxes ``(top, left, h, w)`` whose correlation matrix fits ``memory_budget`` bytes."""
    def matrix_bytes(h, w):
        return ((h // 4) * (w // 4)) ** 2 * 4

    th, tw = height, width
    while matrix_bytes(th, tw) > memory_budget:
        if th >= tw:
            th = max(overlap + 32, (th + overlap) // 2 + 1)
        else:
            tw = max(overlap + 32, (tw + overlap) // 2 + 1)
        if th == overlap + 32 and tw == overlap + 32:
            break
    return [(t, l, th, tw) for t in _tile_starts(height, th, overlap) for l in _tile_starts(width, tw, overlap)]


def _blend_window(h: int, w: int, overlap: int) -> torch.Tensor:
    def ramp(n):
        r = torch.ones(n, dtype=torch.float64)
        k = min(overlap, n // 2)
        if k > 0:
            edge = torch.arange(1, k + 1, dtype=torch.float64) / (k + 1)
            r[:k] = edge
            r[-k:] = edge.flip(0)
        return r

    return ramp(h)[:, None] * ramp(w)[None, :]


@torch.no_grad()
def colorize_tensor_frame(model: VideoColorizer, x_l, ref_lab, prev_lab, memory_budget=DEFAULT_MEMORY_BUDGET):
    """One recurrent step on (1, 1, H, W) luminance, tiling when the matrix exceeds the budget."""
    h, w = x_l.shape[-2:]
    boxes = tile_grid(h, w, memory_budget)
    if len(boxes) == 1:
        ref = model.encode_reference(ref_lab, size=(h, w))
        return model.frame_step(x_l, ref, prev_lab)
    log.info("tiling %dx%d frame into %d tiles", h, w, len(boxes))
    acc = torch.zeros(1, 2, h, w, dtype=torch.float64)
    norm = torch.zeros(1, 1, h, w, dtype=torch.float64)
    for top, left, th, tw in boxes:
        sl = (..., slice(top, top + th), slice(left, left + tw))
        ref = model.encode_reference(ref_lab, size=(th, tw))
        prev = None if prev_lab is None else prev_lab[sl]
        ab, _, _ = model.frame_step(x_l[sl], ref, prev)
        win = _blend_window(th, tw, TILE_OVERLAP)
        acc[sl] += ab.double() * win
        norm[sl] += win
    return (acc / norm).to(x_l.dtype), None, None


@torch.no_grad()
def colorize_clip(model: VideoColorizer, clip: VideoClip, reference: LabFrame, init_prev: str = "zero",
                  memory_budget: int = DEFAULT_MEMORY_BUDGET) -> list[LabFrame]:
    """Colorize ``clip`` in order, each frame conditioned on the previous output."""
    if init_prev not in ("zero", "warped"):
        raise ValueError("init_prev must be 'zero' or 'warped'")
    model.eval()
    dtype = next(model.colornet.parameters()).dtype
    ref_lab = reference.to_tensor(dtype)
    out = []
    prev_lab = None
    for t, frame in enumerate(clip):
        x_l = frame.to_tensor(dtype)[:, :1]
        if t == 0 and init_prev == "warped":
            ref = model.encode_reference(ref_lab, size=frame.shape)
            fx = model.correspondence.fuse_features(model.input_pyramid(x_l))
            warped, _ = model.correspondence.match(fx, ref.grid, ref.ab)
            prev_lab = torch.cat([x_l, F.interpolate(warped, size=frame.shape, mode="bilinear",
                                                     align_corners=False)], dim=1)
        ab, _, _ = colorize_tensor_frame(model, x_l, ref_lab, prev_lab, memory_budget)
        prev_lab = torch.cat([x_l, ab], dim=1)
        out.append(LabFrame(frame.l, ab[0].permute(1, 2, 0).double().numpy()))
    return out


def ab_psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """PSNR of normalized chrominance arrays (peak = 1, i.e. |ab| = 127)."""
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10 * np.log10(peak**2 / mse))
