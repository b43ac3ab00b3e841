"""Training data: augmented pairs with analytic flow, reference retrieval, manifests."""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .backbone import Backbone, perturb_features
from .colorio import (
    FlowField,
    LabFrame,
    OcclusionMask,
    list_frame_files,
    read_flow,
    read_lab,
    read_mask,
    write_flow,
    write_lab,
    write_mask,
)

log = logging.getLogger(__name__)

FULL_CROP = (216, 384)
DESK_CROP = (108, 192)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class AugmentParams:
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)  # (dx, dy) pixels
    shear: float = 0.0  # degrees
    noise_std: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.translation = tuple(float(t) for t in self.translation)
        if not 0.9 <= self.scale <= 1.1:
            raise ValueError("scale must be within [0.9, 1.1]")
        if abs(self.rotation) > 5:
            raise ValueError("rotation must be within [-5, 5] degrees")
        if not 0 <= self.noise_std <= 0.05:
            raise ValueError("noise_std must be within [0, 0.05]")

    @classmethod
    def sample(cls, rng: np.random.Generator, width: int, max_translation: float = 0.05) -> "AugmentParams":
        t = max_translation * width
        return cls(
            rotation=float(rng.uniform(-5, 5)),
            scale=float(rng.uniform(0.9, 1.1)),
            translation=(float(rng.uniform(-t, t)), float(rng.uniform(-t, t))),
            shear=float(rng.uniform(-3, 3)),
            noise_std=float(rng.uniform(0, 0.05)),
            brightness=float(rng.uniform(-0.05, 0.05)),
            contrast=float(rng.uniform(0.9, 1.1)),
            seed=int(rng.integers(2**31)),
        )

    def is_identity(self) -> bool:
        return (self.rotation == 0 and self.scale == 1 and self.translation == (0.0, 0.0) and self.shear == 0)


@dataclass
class ClipSample:
    frame_prev: LabFrame
    frame_cur: LabFrame
    reference: LabFrame
    flow_fwd: FlowField
    mask: OcclusionMask
    same_scene: bool = True

    def __post_init__(self):
        shape = self.frame_prev.shape
        for name in ("frame_cur", "flow_fwd", "mask"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has size {getattr(self, name).shape}, expected {shape}")


def affine_matrix(params: AugmentParams, center) -> np.ndarray:
    """3x3 map from previous-frame (x, y) pixel coordinates to current-frame ones."""
    cx, cy = center
    th = np.deg2rad(params.rotation)
    sh = np.deg2rad(params.shear)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    lin = params.scale * rot @ shear
    c = np.array([cx, cy])
    offset = c - lin @ c + np.asarray(params.translation)
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = offset
    return m


def analytic_flow(matrix: np.ndarray, shape) -> tuple[FlowField, OcclusionMask]:
    """Flow p - A^-1 p at every current-frame pixel, and the in-bounds mask."""
    h, w = shape
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return FlowField(xs - sx, ys - sy), OcclusionMask(inside.astype(np.uint8))


def _crop_origin(shape, crop, seed):
    h, w = shape
    ch, cw = crop
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def augment_image_to_pair(image: LabFrame, params: AugmentParams, crop=DESK_CROP,
                          reference: LabFrame | None = None) -> ClipSample:
    """Make a (previous, current) pair from one still image.

    The current frame is the affine-warped image (cubic spline resampling of the
    whole image, then cropped) with luminance jitter. ``flow_fwd`` is the exact
    flow of the affine map; ``mask`` marks pixels whose source lies in the crop.
    """
    ch, cw = crop
    if image.height < ch or image.width < cw:
        raise ValueError(f"image {image.shape} is smaller than crop {crop}")
    top, left = _crop_origin(image.shape, crop, params.seed)
    prev = LabFrame(image.l[top : top + ch, left : left + cw], image.ab[top : top + ch, left : left + cw])
    matrix = affine_matrix(params, ((cw - 1) / 2, (ch - 1) / 2))
    flow, mask = analytic_flow(matrix, crop)

    if params.is_identity():
        cur_l, cur_ab = prev.l.copy(), prev.ab.copy()
    else:
        # crop-local current pixel p samples the full image at A^-1 p + crop origin
        inv = np.linalg.inv(matrix)
        # ndimage works in (row, col) order
        lin = inv[:2, :2][::-1, ::-1]
        off = inv[:2, 2][::-1] + np.array([top, left])
        warp = lambda plane: ndimage.affine_transform(  # noqa: E731
            plane, lin, offset=off, output_shape=crop, order=3, mode="nearest"
        )
        cur_l = warp(image.l)
        cur_ab = np.stack([warp(image.ab[..., 0]), warp(image.ab[..., 1])], axis=-1)
    geometric = LabFrame(np.clip(cur_l, 0, 1), np.clip(cur_ab, -1, 1))

    rng = np.random.default_rng(params.seed + 1)
    l = (geometric.l - 0.5) * params.contrast + 0.5 + params.brightness
    if params.noise_std > 0:
        l = l + rng.normal(0.0, params.noise_std, size=l.shape)
    cur = LabFrame(np.clip(l, 0, 1), geometric.ab)
    return ClipSample(prev, cur, reference if reference is not None else prev, flow, mask,
                      same_scene=reference is None)


def geometric_only(params: AugmentParams) -> AugmentParams:
    return AugmentParams(params.rotation, params.scale, params.translation, params.shear, seed=params.seed)


# --- references ------------------------------------------------------------------


@dataclass
class ReferenceIndex:
    """Corpus of images indexed by pooled level-5 backbone features."""

    paths: list
    features: np.ndarray  # (n, C), L2-normalized

    @classmethod
    def build(cls, frames, backbone: Backbone, paths=None) -> "ReferenceIndex":
        from .colorio import lab_to_rgb

        feats = []
        with torch.no_grad():
            for f in frames:
                rgb = torch.from_numpy(lab_to_rgb(f).transpose(2, 0, 1).copy())[None].float()
                feats.append(backbone.pooled(rgb)[0].double().numpy())
        feats = np.stack(feats) if feats else np.zeros((0, 1))
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
        return cls(list(paths) if paths is not None else list(range(len(feats))), feats)

    def __len__(self):
        return len(self.paths)


def retrieve_references(query: LabFrame, corpus: ReferenceIndex, k: int, backbone: Backbone) -> list:
    """Top-k corpus entries by cosine similarity of pooled features; ties go to the lower index."""
    if k <= 0:
        return []
    if k > len(corpus):
        warnings.warn(f"k={k} exceeds corpus size {len(corpus)}; returning all entries", stacklevel=2)
        k = len(corpus)
    q = ReferenceIndex.build([query], backbone).features[0]
    sims = corpus.features @ q
    order = np.lexsort((np.arange(len(sims)), -sims))
    return [corpus.paths[i] for i in order[:k]]


@dataclass
class FeatureNoise:
    """Directive: perturb the reference's backbone features before matching."""

    std: float
    seed: int

    def apply(self, pyramid):
        return perturb_features(pyramid, self.std, seed=self.seed)


def corrupt_reference(ref: LabFrame, mode: str = "none", std: float = 0.0, seed: int = 0):
    """Return a noisy reference (``gaussian_image``), a :class:`FeatureNoise`
    directive (``feature_noise``), or ``ref`` unchanged."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if mode not in ("none", "gaussian_image", "feature_noise"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    if mode == "none" or std == 0:
        return ref
    if mode == "feature_noise":
        return FeatureNoise(std, seed)
    rng = np.random.default_rng(seed)
    l = ref.l + rng.normal(0, std, ref.l.shape)
    ab = ref.ab + rng.normal(0, std, ref.ab.shape)
    return LabFrame(np.clip(l, 0, 1), np.clip(ab, -1, 1))


# --- occlusion -----------------------------------------------------------------------


def _bilinear(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(plane, [y, x], order=1, mode="nearest")


def occlusion_mask(flow_fwd: FlowField, flow_bwd: FlowField) -> OcclusionMask:
    """Forward-backward consistency check.

    A pixel is occluded when |F + B(p + F)|^2 > 0.01 (|F|^2 + |B(p + F)|^2) + 0.5.
    """
    if flow_fwd.shape != flow_bwd.shape:
        raise ValueError("forward and backward flows differ in size")
    h, w = flow_fwd.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xs + flow_fwd.u, ys + flow_fwd.v
    bu = _bilinear(flow_bwd.u.astype(np.float64), tx, ty)
    bv = _bilinear(flow_bwd.v.astype(np.float64), tx, ty)
    fu, fv = flow_fwd.u.astype(np.float64), flow_fwd.v.astype(np.float64)
    lhs = (fu + bu) ** 2 + (fv + bv) ** 2
    rhs = 0.01 * (fu**2 + fv**2 + bu**2 + bv**2) + 0.5
    return OcclusionMask((lhs <= rhs).astype(np.uint8))


# --- dataset manifests ---------------------------------------------------------------


@dataclass
class DatasetConfig:
    crop: tuple = DESK_CROP
    augments_per_image: int = 1
    same_scene_fraction: float = 0.5
    retrieve_k: int = 5
    seed: int = 0
    backbone: str = "toy"
    backbone_path: str | None = None

    def __post_init__(self):
        self.crop = tuple(int(c) for c in self.crop)
        if not 0 <= self.same_scene_fraction <= 1:
            raise ValueError("same_scene_fraction must be within [0, 1]")
        if self.augments_per_image < 1:
            raise ValueError("augments_per_image must be >= 1")


@dataclass
class ManifestRecord:
    sample_id: str
    frame_prev: str
    frame_cur: str
    flow: str
    mask: str
    reference: str
    same_scene: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                rec = ManifestRecord(**d)
                for key in ("frame_prev", "frame_cur", "flow", "mask", "reference"):
                    p = getattr(rec, key)
                    if not os.path.isabs(p):
                        setattr(rec, key, os.path.join(base, p))
                out.append(rec)
    return out


def load_sample(rec: ManifestRecord) -> ClipSample:
    return ClipSample(
        read_lab(rec.frame_prev),
        read_lab(rec.frame_cur),
        read_lab(rec.reference),
        read_flow(rec.flow),
        read_mask(rec.mask),
        rec.same_scene,
    )


def _list_images(d):
    if not d or not os.path.isdir(d):
        return []
    return sorted(os.path.join(d, n) for n in os.listdir(d) if n.lower().endswith(IMAGE_EXTENSIONS))


def build_dataset(image_dir, video_dir, out_dir, config: DatasetConfig | None = None,
                  backbone: Backbone | None = None) -> str:
    """Write samples and ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    Images give augmented pairs with analytic flow. Each subdirectory of
    ``video_dir`` is a frame sequence with ``flow/fwd_%05d.flo`` (t -> t+1) and
    optionally ``flow/bwd_%05d.flo`` (t+1 -> t) or ``flow/mask_%05d.png``.
    """
    from .backbone import make_backbone

    config = config or DatasetConfig()
    for d in (image_dir, video_dir):
        if d is not None and not os.path.isdir(d):
            raise FileNotFoundError(f"directory does not exist: {d}")
    rng = np.random.default_rng(config.seed)
    os.makedirs(out_dir, exist_ok=True)
    records: list[ManifestRecord] = []
    ch, cw = config.crop

    images = []
    for p in _list_images(image_dir):
        try:
            images.append((p, read_lab(p)))
        except Exception as exc:  # unreadable files are skipped, not fatal
            log.warning("skipping unreadable image %s: %s", p, exc)

    index = None
    if images and config.same_scene_fraction < 1:
        backbone = backbone or make_backbone(config.backbone, config.backbone_path, config.seed)
        index = ReferenceIndex.build([f for _, f in images], backbone, [p for p, _ in images])

    def rel(p):
        return os.path.relpath(p, out_dir)

    def pick_reference(query, own_path, prev_path):
        same = index is None or rng.uniform() < config.same_scene_fraction
        if same:
            return prev_path, True
        cands = [c for c in retrieve_references(query, index, min(config.retrieve_k + 1, len(index)), backbone) if c != own_path]
        if not cands:
            return prev_path, True
        return cands[int(rng.integers(len(cands)))], False

    for img_idx, (path, frame) in enumerate(images):
        if frame.height < ch or frame.width < cw:
            log.warning("skipping %s: smaller than crop %s", path, config.crop)
            continue
        for a in range(config.augments_per_image):
            sid = f"img{img_idx:05d}_{a:02d}"
            params = AugmentParams.sample(rng, cw)
            s = augment_image_to_pair(frame, params, config.crop)
            sdir = os.path.join(out_dir, sid)
            os.makedirs(sdir, exist_ok=True)
            paths = {k: os.path.join(sdir, n) for k, n in
                     (("prev", "prev.png"), ("cur", "cur.png"), ("flow", "flow.flo"), ("mask", "mask.png"))}
            write_lab(paths["prev"], s.frame_prev)
            write_lab(paths["cur"], s.frame_cur)
            write_flow(paths["flow"], s.flow_fwd)
            write_mask(paths["mask"], s.mask)
            ref_path, same = pick_reference(s.frame_prev, path, paths["prev"])
            records.append(ManifestRecord(sid, rel(paths["prev"]), rel(paths["cur"]), rel(paths["flow"]),
                                          rel(paths["mask"]), rel(ref_path) if same else os.path.abspath(ref_path),
                                          same))

    if video_dir is not None:
        for clip_name in sorted(os.listdir(video_dir)):
            cdir = os.path.join(video_dir, clip_name)
            if not os.path.isdir(cdir):
                continue
            try:
                files = list_frame_files(cdir)
            except ValueError as exc:
                log.warning("skipping clip %s: %s", cdir, exc)
                continue
            fdir = os.path.join(cdir, "flow")
            for t in range(len(files) - 1):
                fwd = os.path.join(fdir, f"fwd_{t:05d}.flo")
                if not os.path.exists(fwd):
                    log.warning("skipping %s pair %d: no flow file %s", clip_name, t, fwd)
                    continue
                sid = f"vid_{clip_name}_{t:05d}"
                mask_path = os.path.join(fdir, f"mask_{t:05d}.png")
                try:
                    if not os.path.exists(mask_path):
                        flow = read_flow(fwd)
                        bwd = os.path.join(fdir, f"bwd_{t:05d}.flo")
                        mask = occlusion_mask(flow, read_flow(bwd)) if os.path.exists(bwd) else \
                            OcclusionMask.ones(*flow.shape)
                        mask_path = os.path.join(out_dir, f"{sid}_mask.png")
                        write_mask(mask_path, mask)
                except Exception as exc:
                    log.warning("skipping %s pair %d: %s", clip_name, t, exc)
                    continue
                records.append(ManifestRecord(sid, os.path.abspath(files[t]), os.path.abspath(files[t + 1]),
                                              os.path.abspath(fwd), os.path.abspath(mask_path),
                                              os.path.abspath(files[0]), True))

    if not records:
        raise ValueError("dataset is empty: no usable images or video pairs found")
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest, records)
    return manifest
