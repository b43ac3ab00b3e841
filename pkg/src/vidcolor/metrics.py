"""Evaluation metrics: colorfulness, temporal flicker, PSNR curves, Frechet distance."""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .colorio import FlowField, LabFrame, OcclusionMask, lab_to_rgb
from .losses import temporal_loss

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
FLICKER_SCALE = 255.0


def colorfulness(rgb) -> float:
    """Hasler-Suesstrunk colorfulness of an RGB image on the 8-bit scale."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    sigma = np.sqrt(rg.std() ** 2 + yb.std() ** 2)
    mu = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(sigma + 0.3 * mu)


def frame_colorfulness(frame: LabFrame) -> float:
    return colorfulness(lab_to_rgb(frame) * 255.0)


def temporal_flicker(video, flows, masks=None) -> float:
    """Mean masked temporal loss over adjacent pairs, on the 8-bit ab scale (x255)."""
    frames = list(video)
    if len(frames) < 2:
        raise ValueError("temporal_flicker needs at least two frames")
    flows = list(flows)
    if len(flows) != len(frames) - 1:
        raise ValueError(f"expected {len(frames) - 1} flows, got {len(flows)}")
    masks = list(masks) if masks is not None else [None] * len(flows)
    vals = []
    for t in range(1, len(frames)):
        prev = frames[t - 1].to_tensor(torch.float64)[:, 1:]
        cur = frames[t].to_tensor(torch.float64)[:, 1:]
        flow = flows[t - 1]
        flow_t = flow.to_tensor(torch.float64) if isinstance(flow, FlowField) else torch.as_tensor(flow)
        mask = masks[t - 1]
        if mask is None:
            mask_t = torch.ones(1, 1, *frames[t].shape, dtype=torch.float64)
        elif isinstance(mask, OcclusionMask):
            mask_t = mask.to_tensor(torch.float64)
        else:
            mask_t = torch.as_tensor(mask, dtype=torch.float64).reshape(1, 1, *frames[t].shape)
        vals.append(float(temporal_loss(prev, cur, flow_t, mask_t)))
    return float(np.mean(vals)) * FLICKER_SCALE


def psnr(pred_rgb, gt_rgb, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred_rgb, dtype=np.float64) - np.asarray(gt_rgb, dtype=np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak**2 / mse)))


def psnr_curve(pred_video, gt_video) -> list[float]:
    """Per-frame PSNR of RGB renders (peak 1.0); identical frames report 99 dB."""
    pred, gt = list(pred_video), list(gt_video)
    if len(pred) != len(gt):
        raise ValueError(f"video lengths differ: {len(pred)} vs {len(gt)}")
    out = []
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise ValueError(f"frame sizes differ: {p.shape} vs {g.shape}")
        out.append(psnr(lab_to_rgb(p), lab_to_rgb(g)))
    return out


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a, b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two (n, d) embedding sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    d = a.shape[1]
    mu1, mu2 = a.mean(0), b.mean(0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    if min(len(a), len(b)) < d:
        warnings.warn(f"fewer samples than embedding dimension {d}; covariance is rank-deficient, "
                      f"adding {eps} to the diagonal", stacklevel=2)
        s1 = s1 + eps * np.eye(d)
        s2 = s2 + eps * np.eye(d)
    r1 = _sqrtm_psd(s1)
    # tr((s1 s2)^1/2) = tr((s1^1/2 s2 s1^1/2)^1/2)
    inner = np.linalg.eigvalsh(r1 @ s2 @ r1)
    tr_cross = np.sqrt(np.clip(inner, 0, None)).sum()
    dist = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_cross)
    return max(dist, 0.0)


class BackboneEmbedder:
    """Pooled level-5 features of a backbone as an image embedding."""

    def __init__(self, backbone):
        self.backbone = backbone
        self.name = f"backbone-{backbone.provenance}-pool5"

    def __call__(self, frames) -> np.ndarray:
        out = []
        with torch.no_grad():
            for f in frames:
                rgb = torch.from_numpy(lab_to_rgb(f).transpose(2, 0, 1).copy())[None].float()
                out.append(self.backbone.pooled(rgb)[0].double().numpy())
        return np.stack(out)


def distribution_metrics(pred_set, real_set, embedder) -> float:
    """FID-style distance of two image sets under any embedding callable."""
    return frechet_distance(embedder(pred_set), embedder(real_set))


def classifier_accuracy(frames, labels, classifier, topk=(1, 5)) -> dict:
    """Top-k accuracy for a pluggable classifier returning (n, classes) scores."""
    scores = np.asarray(classifier(frames))
    labels = np.asarray(labels)
    ranks = np.argsort(-scores, axis=1)
    return {f"top{k}": float(np.mean([labels[i] in ranks[i, :k] for i in range(len(labels))])) for k in topk}


@dataclass
class VideoEval:
    name: str
    colorfulness: float
    flicker: float | None
    psnr: list = field(default_factory=list)


@dataclass
class EvalReport:
    videos: list
    colorfulness: float
    flicker: float | None
    psnr_mean: float | None
    fid: float | None = None
    embedder: str | None = None
    top1: float | None = None
    top5: float | None = None

    @classmethod
    def aggregate(cls, videos: list[VideoEval], **extra) -> "EvalReport":
        flick = [v.flicker for v in videos if v.flicker is not None]
        ps = [float(np.mean(v.psnr)) for v in videos if v.psnr]
        return cls(
            videos,
            float(np.mean([v.colorfulness for v in videos])),
            float(np.mean(flick)) if flick else None,
            float(np.mean(ps)) if ps else None,
            **extra,
        )

    def records(self) -> list[str]:
        return [json.dumps(asdict(v), sort_keys=True) for v in self.videos]

    def text(self) -> str:
        lines = [f"videos: {len(self.videos)}", f"colorfulness: {self.colorfulness:.4f}"]
        if self.flicker is not None:
            lines.append(f"flicker(x255): {self.flicker:.4f}")
        if self.psnr_mean is not None:
            lines.append(f"psnr_mean_db: {self.psnr_mean:.4f}")
        if self.fid is not None:
            lines.append(f"fid[{self.embedder}]: {self.fid:.4f}")
        for v in self.videos:
            ps = " ".join(f"{p:.2f}" for p in v.psnr)
            fl = "n/a" if v.flicker is None else f"{v.flicker:.4f}"
            lines.append(f"  {v.name}: colorfulness={v.colorfulness:.4f} flicker={fl} psnr=[{ps}]")
        return "\n".join(lines)


def evaluate_video(name, pred, gt=None, flows=None, masks=None) -> VideoEval:
    pred = list(pred)
    colorful = float(np.mean([frame_colorfulness(f) for f in pred]))
    flick = temporal_flicker(pred, flows, masks) if flows is not None and len(pred) > 1 else None
    curve = psnr_curve(pred, gt) if gt is not None else []
    return VideoEval(name, colorful, flick, curve)


def load_flows(flow_dir, n_pairs: int, shape):
    """Read ``fwd_%05d.flo`` (and optional ``mask_%05d.png``) for ``n_pairs`` pairs.

    A missing directory means zero flow and full masks.
    """
    from .colorio import read_flow, read_mask

    flows, masks = [], []
    for t in range(n_pairs):
        fp = os.path.join(flow_dir, f"fwd_{t:05d}.flo") if flow_dir else None
        mp = os.path.join(flow_dir, f"mask_{t:05d}.png") if flow_dir else None
        flows.append(read_flow(fp) if fp and os.path.exists(fp) else FlowField.zeros(*shape))
        masks.append(read_mask(mp) if mp and os.path.exists(mp) else OcclusionMask.ones(*shape))
    return flows, masks
