"""Exemplar-based video colorization with a recurrent correspondence + colorization network."""

from .colorio import FlowField, LabFrame, OcclusionMask, VideoClip, lab_to_rgb, rgb_to_lab
from .pipeline import VideoColorizer, colorize_clip

__all__ = [
    "FlowField",
    "LabFrame",
    "OcclusionMask",
    "VideoClip",
    "VideoColorizer",
    "colorize_clip",
    "lab_to_rgb",
    "rgb_to_lab",
]
__version__ = "0.1.0"
