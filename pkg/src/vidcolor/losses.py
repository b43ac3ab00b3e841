"""Training objectives for the video colorization network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .colorio import LabFrame

TERMS = ("perc", "context", "smooth", "adv", "temporal", "l1")

# (dy, dx) of the 8-connected neighborhood
NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _default_context_weights():
    return {2: 0.5, 3: 1.0, 4: 2.0, 5: 4.0}


@dataclass
class LossWeights:
    lambda_perc: float = 0.001
    lambda_context: float = 0.2
    lambda_smooth: float = 5.0
    lambda_adv: float = 0.2
    lambda_temporal: float = 0.02
    lambda_l1: float = 2.0
    tau: float = 0.01
    h: float = 0.1
    eps: float = 1e-5
    context_level_weights: dict = field(default_factory=_default_context_weights)
    wls_sigma: float = 0.1
    smooth_norm: str = "l1"
    temporal_norm: str = "l1"
    # sampled output positions per level for the contextual term; None = all
    context_max_rows: int | None = None

    def __post_init__(self):
        self.context_level_weights = {int(k): float(v) for k, v in self.context_level_weights.items()}
        for name in ("lambda_perc", "lambda_context", "lambda_smooth", "lambda_adv", "lambda_temporal",
                     "lambda_l1", "h", "eps", "wls_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if any(v < 0 for v in self.context_level_weights.values()):
            raise ValueError("context_level_weights must be non-negative")
        for name in ("smooth_norm", "temporal_norm"):
            if getattr(self, name) not in ("l1", "l2"):
                raise ValueError(f"{name} must be 'l1' or 'l2'")

    def coefficient(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_level_weights"] = {str(k): v for k, v in self.context_level_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: object  # tensor during training, float otherwise

    def as_dict(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total)
        return out

    def log_line(self, step: int) -> str:
        return json.dumps({"step": step, **self.as_dict()}, sort_keys=True)


def total_loss(terms: dict, weights: LossWeights, use_l1: bool = True) -> LossReport:
    """Weighted sum of the generator terms. ``l1`` is only needed when ``use_l1``."""
    required = [t for t in TERMS if use_l1 or t != "l1"]
    missing = [t for t in required if t not in terms]
    if missing:
        raise ValueError(f"missing loss terms: {', '.join(missing)}")
    coeffs = {t: weights.coefficient(t) for t in required}
    total = sum(coeffs[t] * terms[t] for t in required)
    return LossReport({t: terms[t] for t in required}, coeffs, total)


# --- perceptual / contextual ----------------------------------------------------


def perceptual_loss(pred_rgb: torch.Tensor, gt_rgb: torch.Tensor, backbone, level: int = 5) -> torch.Tensor:
    """Mean squared difference of level-5 backbone features of two RGB renders."""
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"shape mismatch {tuple(pred_rgb.shape)} vs {tuple(gt_rgb.shape)}")
    return F.mse_loss(backbone(pred_rgb)[level], backbone(gt_rgb)[level])


def _unit_rows(f: torch.Tensor) -> torch.Tensor:
    rows = f.flatten(1).transpose(0, 1)  # (P, C)
    rows = rows - rows.mean(dim=0, keepdim=True)
    return rows / rows.norm(dim=1, keepdim=True).clamp_min(1e-8)


def contextual_level(fx: torch.Tensor, fy: torch.Tensor, h: float = 0.1, eps: float = 1e-5,
                     max_rows: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Forward-matching contextual loss for one feature level.

    ``fx``/``fy`` are (N, C, H, W) (or (C, H, W)); the result is averaged over N.
    With ``max_rows`` set, the mean over output positions is estimated from
    that many sampled positions (each matched against every reference position).
    """
    if fx.dim() == 3:
        fx, fy = fx[None], fy[None]
    if fx.shape[:2] != fy.shape[:2]:
        raise ValueError(f"feature shapes differ: {tuple(fx.shape)} vs {tuple(fy.shape)}")
    losses = []
    # one item at a time bounds memory at P_x * P_y
    for x, y in zip(fx, fy):
        ux = _unit_rows(x)
        if max_rows is not None and ux.shape[0] > max_rows:
            if generator is not None:
                idx = torch.randperm(ux.shape[0], generator=generator)[:max_rows]
            else:
                idx = torch.linspace(0, ux.shape[0] - 1, max_rows).round().long()
            ux = ux[idx]
        d = 1.0 - ux @ _unit_rows(y).T
        d_min = d.min(dim=1, keepdim=True).values
        d_norm = d / (d_min + eps)
        logits = (1.0 - d_norm) / h
        # max_j softmax_j = exp(max - logsumexp)
        log_max_a = logits.max(dim=1).values - torch.logsumexp(logits, dim=1)
        cx = torch.exp(log_max_a).mean()
        losses.append(-torch.log(cx))
    return torch.stack(losses).mean()


def contextual_loss(pred, reference, level_weights=None, h: float = 0.1, eps: float = 1e-5,
                    max_rows: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Weighted sum over levels of :func:`contextual_level`.

    ``pred`` and ``reference`` are FeaturePyramids or dicts level -> tensor.
    """
    level_weights = level_weights or _default_context_weights()
    px = pred.levels if hasattr(pred, "levels") else pred
    py = reference.levels if hasattr(reference, "levels") else reference
    total = 0.0
    for lvl, w in level_weights.items():
        if w == 0:
            continue
        total = total + w * contextual_level(px[lvl], py[lvl], h, eps, max_rows, generator)
    return total


# --- smoothness -------------------------------------------------------------------


def _shift_stack(x: torch.Tensor, fill: str = "replicate") -> torch.Tensor:
    """(N, C, H, W) -> (N, C, 8, H, W) of 8-neighbor values."""
    h, w = x.shape[-2:]
    p = F.pad(x, (1, 1, 1, 1), mode=fill) if fill == "replicate" else F.pad(x, (1, 1, 1, 1))
    return torch.stack([p[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in NEIGHBORS], dim=2)


def wls_weights(guide, sigma: float = 0.1) -> torch.Tensor:
    """Edge-aware 8-neighbor weights from guide luminance, normalized per pixel.

    ``guide`` is a LabFrame or an (N, 1, H, W) luminance tensor. Returns
    (N, 8, H, W); neighbors outside the image get weight 0.
    """
    if isinstance(guide, LabFrame):
        guide = torch.from_numpy(guide.l)[None, None]
    n, _, h, w = guide.shape
    nb = _shift_stack(guide)[:, 0]
    valid = _shift_stack(torch.ones(1, 1, h, w, dtype=guide.dtype), fill="zeros")[:, 0]
    raw = torch.exp(-((guide - nb) ** 2) / (2 * sigma**2)) * valid
    return raw / raw.sum(dim=1, keepdim=True)


def smoothness_loss(pred_ab: torch.Tensor, guide, sigma: float = 0.1, norm: str = "l1",
                    weights: torch.Tensor | None = None) -> torch.Tensor:
    """Deviation of each pixel's chrominance from its weighted 8-neighborhood mean.

    Summed over channels, averaged over pixels and batch.
    """
    if weights is None:
        weights = wls_weights(guide, sigma).to(pred_ab.dtype)
    nb = _shift_stack(pred_ab)
    dev = pred_ab - (weights[:, None] * nb).sum(dim=2)
    dev = dev.abs() if norm == "l1" else dev**2
    return dev.sum(dim=1).mean()


# --- adversarial --------------------------------------------------------------------


def adversarial_losses(fake_scores: torch.Tensor, real_scores: torch.Tensor):
    """Relativistic-average least-squares losses ``(g_loss, d_loss)``."""
    if fake_scores.shape != real_scores.shape:
        raise ValueError("fake and real score batches differ in size")
    fake_rel = fake_scores - real_scores.mean()
    real_rel = real_scores - fake_scores.mean()
    g_loss = ((fake_rel - 1) ** 2).mean() + ((real_rel + 1) ** 2).mean()
    d_loss = ((real_rel - 1) ** 2).mean() + ((fake_rel + 1) ** 2).mean()
    return g_loss, d_loss


# --- temporal -----------------------------------------------------------------------


def warp_by_flow(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``frame`` at ``p - flow(p)``; out-of-range samples clamp to the border.

    ``frame`` is (N, C, H, W), ``flow`` (N, 2, H, W) with channels (u, v) in pixels.
    """
    n, _, h, w = frame.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=frame.dtype), torch.arange(w, dtype=frame.dtype), indexing="ij"
    )
    sx = xs[None] - flow[:, 0].to(frame.dtype)
    sy = ys[None] - flow[:, 1].to(frame.dtype)
    grid = torch.stack([2 * sx / max(w - 1, 1) - 1, 2 * sy / max(h - 1, 1) - 1], dim=-1)
    return F.grid_sample(frame, grid, mode="bilinear", padding_mode="border", align_corners=True)


def temporal_loss(prev_ab: torch.Tensor, cur_ab: torch.Tensor, flow: torch.Tensor, mask: torch.Tensor,
                  norm: str = "l1") -> torch.Tensor:
    """Masked mean of |warp(prev_ab, flow) - cur_ab| over unmasked pixels and both channels."""
    mask = mask.to(cur_ab.dtype)
    denom = mask.sum() * cur_ab.shape[1]
    if denom == 0:
        return cur_ab.sum() * 0.0
    diff = warp_by_flow(prev_ab, flow) - cur_ab
    diff = diff.abs() if norm == "l1" else diff**2
    return (diff * mask).sum() / denom


def l1_loss(pred_ab: torch.Tensor, gt_ab: torch.Tensor) -> torch.Tensor:
    return (pred_ab - gt_ab).abs().mean()
