"""LAB color conversion, frame containers and on-disk formats.

Luminance is stored normalized to [0, 1] (L / 100) and chrominance to
[-1, 1] (a / 127, b / 127). Conversions use sRGB primaries and the D65
white point.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

L_SCALE = 100.0
AB_SCALE = 127.0

# sRGB (linear) -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65 = np.array([0.95047, 1.0, 1.08883])

_DELTA = 6.0 / 29.0
FLO_MAGIC = 202021.25
FRAME_PATTERN = "frame_{:05d}.png"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.png$")


class FlowFormatError(ValueError):
    pass


class FrameSequenceError(ValueError):
    pass


@dataclass
class LabFrame:
    """One frame in normalized LAB: ``l`` is (H, W), ``ab`` is (H, W, 2)."""

    l: np.ndarray
    ab: np.ndarray

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64)
        self.ab = np.asarray(self.ab, dtype=np.float64)
        if self.l.ndim != 2 or self.ab.ndim != 3 or self.ab.shape[2] != 2:
            raise ValueError(f"bad LabFrame shapes l={self.l.shape} ab={self.ab.shape}")
        if self.l.shape != self.ab.shape[:2]:
            raise ValueError(f"l {self.l.shape} and ab {self.ab.shape[:2]} differ in size")
        if not (np.all(np.isfinite(self.l)) and np.all(np.isfinite(self.ab))):
            raise ValueError("LabFrame contains non-finite values")
        if self.l.min(initial=0.0) < -1e-9 or self.l.max(initial=0.0) > 1 + 1e-9:
            raise ValueError("l outside [0, 1]")
        if np.abs(self.ab).max(initial=0.0) > 1 + 1e-9:
            raise ValueError("ab outside [-1, 1]")
        self.l = np.clip(self.l, 0.0, 1.0)
        self.ab = np.clip(self.ab, -1.0, 1.0)

    @property
    def height(self) -> int:
        return self.l.shape[0]

    @property
    def width(self) -> int:
        return self.l.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.l.shape

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return a (1, 3, H, W) tensor with channels (l, a, b)."""
        arr = np.concatenate([self.l[..., None], self.ab], axis=2)
        return torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(dtype).unsqueeze(0)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "LabFrame":
        """Inverse of :meth:`to_tensor`; accepts (3, H, W) or (1, 3, H, W)."""
        arr = t.detach().cpu().double().numpy()
        if arr.ndim == 4:
            arr = arr[0]
        return cls(np.clip(arr[0], 0, 1), np.clip(arr[1:].transpose(1, 2, 0), -1, 1))

    def gray(self) -> "LabFrame":
        return LabFrame(self.l, np.zeros_like(self.ab))


@dataclass
class VideoClip:
    frames: list[LabFrame] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("VideoClip needs at least one frame")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"frame {i} has size {f.shape}, expected {shape}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[LabFrame]:
        return iter(self.frames)

    def __getitem__(self, i: int) -> LabFrame:
        return self.frames[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


@dataclass
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, each (H, W)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"flow planes must be equal 2-D arrays, got {self.u.shape}, {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(1, 2, H, W) tensor with channels (u, v)."""
        return torch.from_numpy(np.stack([self.u, self.v])).to(dtype).unsqueeze(0)


@dataclass
class OcclusionMask:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask values must be 0 or 1")
        self.m = m.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    @classmethod
    def ones(cls, height: int, width: int) -> "OcclusionMask":
        return cls(np.ones((height, width), dtype=np.uint8))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.m.astype(np.float32)).to(dtype)[None, None]


# --- color conversion -------------------------------------------------------


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _finv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb) -> LabFrame:
    """Convert an (H, W, 3) sRGB image with values in [0, 1] to a LabFrame."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    if not np.all(np.isfinite(rgb)):
        raise ValueError("rgb_to_lab: input contains NaN or infinite values")
    if rgb.min() < -1e-6 or rgb.max() > 1 + 1e-6:
        raise ValueError(f"rgb_to_lab: values must lie in [0, 1], got [{rgb.min()}, {rgb.max()}]")
    xyz = _srgb_to_linear(np.clip(rgb, 0, 1)) @ _RGB_TO_XYZ.T
    fx, fy, fz = (_f(xyz[..., i] / _D65[i]) for i in range(3))
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    l = np.clip(L / L_SCALE, 0.0, 1.0)
    ab = np.clip(np.stack([a, b], axis=-1) / AB_SCALE, -1.0, 1.0)
    return LabFrame(l, ab)


def lab_to_rgb(frame: LabFrame) -> np.ndarray:
    """Render a LabFrame to (H, W, 3) sRGB in [0, 1]; out-of-gamut values clamp."""
    return lab_arrays_to_rgb(frame.l, frame.ab)


def lab_arrays_to_rgb(l: np.ndarray, ab: np.ndarray) -> np.ndarray:
    L = np.asarray(l, dtype=np.float64) * L_SCALE
    a = np.asarray(ab[..., 0], dtype=np.float64) * AB_SCALE
    b = np.asarray(ab[..., 1], dtype=np.float64) * AB_SCALE
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_finv(fx) * _D65[0], _finv(fy) * _D65[1], _finv(fz) * _D65[2]], axis=-1)
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0)


def lab_tensor_to_rgb(lab: torch.Tensor) -> torch.Tensor:
    """Differentiable LAB -> sRGB for (N, 3, H, W) tensors in normalized units."""
    L = lab[:, 0] * L_SCALE
    a = lab[:, 1] * AB_SCALE
    b = lab[:, 2] * AB_SCALE
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0

    def finv(t):
        return torch.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))

    xyz = torch.stack([finv(fx) * _D65[0], finv(fy) * _D65[1], finv(fz) * _D65[2]], dim=1)
    m = torch.as_tensor(_XYZ_TO_RGB, dtype=lab.dtype, device=lab.device)
    lin = torch.einsum("ij,njhw->nihw", m, xyz)
    # small floor keeps the gamma branch differentiable at 0
    lin = lin.clamp(min=1e-8)
    rgb = torch.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)
    return rgb.clamp(0.0, 1.0)


def compose_lab(l: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
    return torch.cat([l, ab], dim=1)


# --- frame sequences ----------------------------------------------------------


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_lab(path) -> LabFrame:
    return rgb_to_lab(read_rgb(path))


def write_lab(path, frame: LabFrame) -> None:
    write_rgb(path, lab_to_rgb(frame))


def list_frame_files(dir_path) -> list[str]:
    """Sorted frame paths of a directory; raises on a numbering gap."""
    indices = {}
    for name in os.listdir(dir_path):
        m = _FRAME_RE.match(name)
        if m:
            indices[int(m.group(1))] = os.path.join(dir_path, name)
    if not indices:
        raise FrameSequenceError(f"no frame_%05d.png files in {dir_path}")
    for i in range(max(indices) + 1):
        if i not in indices:
            raise FrameSequenceError(f"missing frame index {i} ({FRAME_PATTERN.format(i)}) in {dir_path}")
    return [indices[i] for i in range(len(indices))]


def read_frame_sequence(dir_path) -> VideoClip:
    frames = [read_lab(p) for p in list_frame_files(dir_path)]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise FrameSequenceError(f"frame {i} has size {f.shape}, expected {shape}")
    return VideoClip(frames)


def write_frame_sequence(clip: VideoClip | Sequence[LabFrame], dir_path) -> list[str]:
    os.makedirs(dir_path, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        p = os.path.join(dir_path, FRAME_PATTERN.format(i))
        write_lab(p, frame)
        paths.append(p)
    return paths


# --- flow and mask files ----------------------------------------------------------


def read_flow(path) -> FlowField:
    """Read a Middlebury ``.flo`` file."""
    with open(path, "rb") as fh:
        magic = np.fromfile(fh, np.float32, count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            got = magic[0] if magic.size else "<empty>"
            raise FlowFormatError(f"{path}: bad .flo magic {got}, expected {FLO_MAGIC}")
        dims = np.fromfile(fh, np.int32, count=2)
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise FlowFormatError(f"{path}: bad .flo header dimensions")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(fh, np.float32, count=2 * w * h)
    if data.size != 2 * w * h:
        raise FlowFormatError(f"{path}: truncated .flo payload ({data.size} of {2 * w * h} floats)")
    data = data.reshape(h, w, 2)
    return FlowField(data[..., 0], data[..., 1])


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as fh:
        np.array([FLO_MAGIC], np.float32).tofile(fh)
        np.array([w, h], np.int32).tofile(fh)
        np.stack([flow.u, flow.v], axis=-1).astype(np.float32).tofile(fh)


def read_mask(path) -> OcclusionMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return OcclusionMask((arr >= 128).astype(np.uint8))


def write_mask(path, mask: OcclusionMask) -> None:
    Image.fromarray((mask.m * 255).astype(np.uint8), mode="L").save(path)
