"""Frozen feature pyramid extractor (VGG19 layout or a small seeded toy)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_named_arrays, save_named_arrays
from .colorio import LabFrame

LEVELS = (2, 3, 4, 5)
MIN_SIZE = 32

# channels per conv, grouped by pooling stage; level L is tapped after the
# second conv of stage L (relu{L}_2)
VGG19_STAGES = [[64, 64], [128, 128], [256, 256, 256, 256], [512, 512, 512, 512], [512, 512]]
TOY_STAGES = [[8, 8], [16, 16], [32, 32], [64, 64], [64, 64]]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class FeaturePyramid:
    """Backbone features keyed by level 2..5, each (N, C_L, H / 2^(L-1), W / 2^(L-1))."""

    levels: dict
    provenance: str = "toy"

    def __post_init__(self):
        if set(self.levels) != set(LEVELS):
            raise ValueError(f"pyramid must hold levels {LEVELS}, got {sorted(self.levels)}")

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid({k: v.detach() for k, v in self.levels.items()}, self.provenance)


class Backbone(nn.Module):
    """VGG-style conv stack with relu{2..5}_2 taps. Parameters never train."""

    def __init__(self, stages=None, mean=IMAGENET_MEAN, std=IMAGENET_STD, provenance="toy"):
        super().__init__()
        self.stage_widths = [list(s) for s in (stages or TOY_STAGES)]
        self.provenance = provenance
        self.stages = nn.ModuleList()
        cin = 3
        for widths in self.stage_widths:
            convs = nn.ModuleList()
            for c in widths:
                convs.append(nn.Conv2d(cin, c, 3, padding=1))
                cin = c
            self.stages.append(convs)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.freeze()

    @property
    def level_channels(self) -> dict:
        return {lvl: self.stage_widths[lvl - 1][1] for lvl in LEVELS}

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def forward(self, rgb: torch.Tensor) -> FeaturePyramid:
        if rgb.dim() != 4 or rgb.shape[1] != 3:
            raise ValueError(f"backbone expects (N, 3, H, W), got {tuple(rgb.shape)}")
        h, w = rgb.shape[-2:]
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValueError(f"backbone input {h}x{w} is smaller than {MIN_SIZE}x{MIN_SIZE}; level 5 would vanish")
        x = (rgb - self.mean.to(rgb.dtype)) / self.std.to(rgb.dtype)
        levels = {}
        for s, convs in enumerate(self.stages):
            if s > 0:
                x = F.max_pool2d(x, 2)
            for k, conv in enumerate(convs):
                x = F.relu(conv(x))
                if k == 1 and s + 1 in LEVELS:
                    levels[s + 1] = x
        return FeaturePyramid(levels, self.provenance)

    def pooled(self, rgb: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled level-5 features, (N, C5)."""
        return self(rgb)[5].mean(dim=(2, 3))

    def save(self, path) -> None:
        arrays = {name: p for name, p in self.state_dict().items() if name not in ("mean", "std")}
        meta = {
            "kind": "backbone",
            "provenance": self.provenance,
            "stages": self.stage_widths,
            "mean": self.mean.flatten().tolist(),
            "std": self.std.flatten().tolist(),
        }
        save_named_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Backbone":
        arrays, meta = load_named_arrays(path)
        if meta.get("kind") != "backbone":
            raise ValueError(f"{path} is not a backbone checkpoint")
        net = cls(meta["stages"], meta["mean"], meta["std"], provenance=meta.get("provenance", "pretrained"))
        state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
        state["mean"], state["std"] = net.mean, net.std
        net.load_state_dict(state, strict=True)
        return net.freeze()


def toy_backbone(seed: int = 0, width_scale: float = 1.0) -> Backbone:
    """Randomly initialized 10-conv backbone with the VGG level geometry."""
    stages = [[max(1, int(round(c * width_scale))) for c in s] for s in TOY_STAGES]
    gen = torch.Generator().manual_seed(seed)
    net = Backbone(stages, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), provenance="toy")
    with torch.no_grad():
        for convs in net.stages:
            for conv in convs:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
    return net


def vgg19_from_torchvision(state_dict) -> Backbone:
    """Build the pretrained-layout backbone from a torchvision ``vgg19`` state dict.

    Only the convolutions up to relu5_2 are taken; ``features.{i}`` entries are
    consumed in order.
    """
    net = Backbone(VGG19_STAGES, provenance="pretrained")
    conv_keys = sorted(
        {int(k.split(".")[1]) for k in state_dict if k.startswith("features.") and k.endswith(".weight")}
    )
    convs = [c for stage in net.stages for c in stage]
    if len(conv_keys) < len(convs):
        raise ValueError(f"state dict has {len(conv_keys)} convs, need {len(convs)}")
    with torch.no_grad():
        for conv, idx in zip(convs, conv_keys):
            conv.weight.copy_(state_dict[f"features.{idx}.weight"])
            conv.bias.copy_(state_dict[f"features.{idx}.bias"])
    return net.freeze()


def default_backbone_path() -> str:
    cache = os.environ.get("COLORIZER_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "vidcolor"))
    return os.path.join(cache, "vgg19_backbone.npz")


def make_backbone(kind: str = "toy", path=None, seed: int = 0) -> Backbone:
    if kind == "toy":
        return toy_backbone(seed)
    if kind == "pretrained":
        path = path or default_backbone_path()
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"pretrained backbone checkpoint not found at {path}; set COLORIZER_CACHE or convert "
                "torchvision VGG19 weights with vidcolor.backbone.vgg19_from_torchvision(...).save(path)"
            )
        return Backbone.load(path)
    raise ValueError(f"unknown backbone kind {kind!r} (expected 'pretrained' or 'toy')")


def gray_to_rgb(l: torch.Tensor) -> torch.Tensor:
    """Replicate a (N, 1, H, W) luminance plane to three channels."""
    return l.expand(-1, 3, -1, -1)


def extract_pyramid(backbone: Backbone, image) -> FeaturePyramid:
    """Features for a luminance plane (H, W), a LabFrame, or an (N, 3, H, W) RGB tensor.

    Luminance planes are channel-replicated; LabFrames are rendered to sRGB.
    """
    from .colorio import lab_to_rgb

    dtype = next(backbone.parameters()).dtype
    if isinstance(image, LabFrame):
        rgb = torch.from_numpy(lab_to_rgb(image).transpose(2, 0, 1).copy())[None]
    elif isinstance(image, np.ndarray) and image.ndim == 2:
        rgb = gray_to_rgb(torch.from_numpy(image)[None, None])
    elif isinstance(image, torch.Tensor):
        rgb = image
    else:
        raise TypeError(f"cannot extract features from {type(image).__name__}")
    return backbone(rgb.to(dtype))


def perturb_features(pyramid: FeaturePyramid, noise_std: float, generator: torch.Generator | None = None,
                     seed: int | None = None) -> FeaturePyramid:
    """Add i.i.d. zero-mean Gaussian noise of ``noise_std`` to every level."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if noise_std == 0:
        return pyramid
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    out = {}
    for lvl in LEVELS:
        f = pyramid[lvl]
        noise = torch.randn(f.shape, generator=generator, dtype=f.dtype)
        out[lvl] = f + noise_std * noise
    return FeaturePyramid(out, pyramid.provenance)
