"""Joint training of the correspondence and colorization subnets against the discriminator."""

from __future__ import annotations

import glob
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .backbone import LEVELS, FeaturePyramid
from .checkpoint import (
    load_module_arrays,
    load_named_arrays,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    save_named_arrays,
)
from .colorio import lab_tensor_to_rgb
from .correspondence import fit_reference, reference_rgb
from .datapipe import ClipSample, load_sample, read_manifest
from .discriminator import Discriminator, frame_pairs, pad_to_multiple
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    contextual_loss,
    l1_loss,
    perceptual_loss,
    smoothness_loss,
    temporal_loss,
    total_loss,
)
from .pipeline import ReferenceEncoding, VideoColorizer

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, step):
        self.term = term
        super().__init__(f"non-finite loss term '{term}' at step {step}")


@dataclass
class TrainConfig:
    manifest: str = ""
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 10
    max_steps: int | None = None
    adv_warmup_steps: int | None = None  # None: two epochs
    seed: int = 0
    backbone: str = "toy"
    backbone_path: str | None = None
    width_scale: float = 0.25
    reference_color_features: bool = True
    corrupt_prob: float = 0.5
    corrupt_image_std: float = 0.05
    corrupt_feature_std: float = 0.1
    grad_clip: float = 5.0
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 100
    log_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)

    def problems(self, check_paths: bool = True) -> list[str]:
        p = []
        for name in ("lr", "batch_size", "epochs", "width_scale", "checkpoint_every", "grad_clip", "log_every"):
            if not getattr(self, name) > 0:
                p.append(f"{name}: must be positive (got {getattr(self, name)!r})")
        for name in ("beta1", "beta2", "corrupt_prob"):
            if not 0 <= getattr(self, name) < 1 + (name == "corrupt_prob"):
                p.append(f"{name}: out of range (got {getattr(self, name)!r})")
        for name in ("corrupt_image_std", "corrupt_feature_std"):
            if getattr(self, name) < 0:
                p.append(f"{name}: must be non-negative")
        if self.max_steps is not None and self.max_steps < 0:
            p.append("max_steps: must be non-negative")
        if self.adv_warmup_steps is not None and self.adv_warmup_steps < 0:
            p.append("adv_warmup_steps: must be non-negative")
        if self.backbone not in ("toy", "pretrained"):
            p.append(f"backbone: must be 'toy' or 'pretrained' (got {self.backbone!r})")
        if check_paths:
            if not self.manifest:
                p.append("manifest: required")
            elif not os.path.exists(self.manifest):
                p.append(f"manifest: file not found: {self.manifest}")
        return p

    def validate(self, check_paths: bool = True) -> "TrainConfig":
        p = self.problems(check_paths)
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            d = json.load(fh)
        cfg = cls.from_dict(d)
        if cfg.manifest and not os.path.isabs(cfg.manifest):
            cfg.manifest = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.manifest)
        return cfg


@dataclass
class TrainState:
    config: TrainConfig
    model: VideoColorizer
    disc: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0


def build_state(config: TrainConfig) -> TrainState:
    model = VideoColorizer.build(config.backbone, config.width_scale, config.seed, config.backbone_path,
                                 config.reference_color_features)
    disc = Discriminator(width_scale=config.width_scale)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(model.trainable_parameters(), lr=config.lr, betas=betas, amsgrad=True)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=betas, amsgrad=True)
    return TrainState(config, model, disc, opt_g, opt_d, 0)


@dataclass
class Batch:
    prev_lab: torch.Tensor
    cur_lab: torch.Tensor
    ref_lab: torch.Tensor
    flow: torch.Tensor
    mask: torch.Tensor
    same_scene: torch.Tensor

    @classmethod
    def collate(cls, samples: list[ClipSample]) -> "Batch":
        size = samples[0].frame_prev.shape
        return cls(
            torch.cat([s.frame_prev.to_tensor() for s in samples]),
            torch.cat([s.frame_cur.to_tensor() for s in samples]),
            torch.cat([fit_reference(s.reference.to_tensor(), size) for s in samples]),
            torch.cat([s.flow_fwd.to_tensor() for s in samples]),
            torch.cat([s.mask.to_tensor() for s in samples]),
            torch.tensor([bool(s.same_scene) for s in samples]),
        )


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63))


def adversarial_active(config: TrainConfig, step: int, steps_per_epoch: int) -> bool:
    warmup = config.adv_warmup_steps if config.adv_warmup_steps is not None else 2 * steps_per_epoch
    return step >= warmup and config.weights.lambda_adv > 0


def _corrupt(batch: Batch, config: TrainConfig, gen: torch.Generator):
    """Per-sample reference corruption for same-scene samples; returns (ref_lab, feature_std)."""
    n = batch.ref_lab.shape[0]
    draw = torch.rand(n, generator=gen)
    mode = torch.rand(n, generator=gen)
    hit = batch.same_scene & (draw < config.corrupt_prob)
    image_hit = hit & (mode < 0.5)
    feat_std = torch.where(hit & ~image_hit, config.corrupt_feature_std, 0.0)
    noise = torch.randn(batch.ref_lab.shape, generator=gen) * config.corrupt_image_std
    ref = batch.ref_lab + noise * image_hit.view(n, 1, 1, 1).to(noise.dtype)
    ref = torch.cat([ref[:, :1].clamp(0, 1), ref[:, 1:].clamp(-1, 1)], dim=1)
    return ref, feat_std


def _noisy_pyramid(pyr: FeaturePyramid, std: torch.Tensor, gen: torch.Generator) -> FeaturePyramid:
    if not bool((std > 0).any()):
        return pyr
    out = {}
    for lvl in LEVELS:
        f = pyr[lvl]
        out[lvl] = f + std.view(-1, 1, 1, 1).to(f.dtype) * torch.randn(f.shape, generator=gen, dtype=f.dtype)
    return FeaturePyramid(out, pyr.provenance)


def train_step(batch: Batch | list[ClipSample], state: TrainState, steps_per_epoch: int = 1):
    """One discriminator update (when adversarial training is on), then one generator update."""
    if not isinstance(batch, Batch):
        batch = Batch.collate(batch)
    cfg = state.config
    w = cfg.weights
    model, disc = state.model, state.disc
    model.train()
    disc.train()
    gen = _step_generator(cfg.seed, state.step)
    adv_on = adversarial_active(cfg, state.step, steps_per_epoch)

    ref_lab, feat_std = _corrupt(batch, cfg, gen)
    ref_pyr = model.backbone(reference_rgb(ref_lab, model.reference_color_features))
    ref_pyr = _noisy_pyramid(ref_pyr, feat_std, gen)
    ref = ReferenceEncoding(model.correspondence.fuse_features(ref_pyr), ref_lab[:, 1:])

    l_prev, l_cur = batch.prev_lab[:, :1], batch.cur_lab[:, :1]
    ab_prev, _, _ = model.frame_step(l_prev, ref, None)
    pred_prev = torch.cat([l_prev, ab_prev], dim=1)
    ab_cur, _, _ = model.frame_step(l_cur, ref, pred_prev)
    pred_cur = torch.cat([l_cur, ab_cur], dim=1)

    real_pairs = pad_to_multiple(frame_pairs(batch.prev_lab, batch.cur_lab))
    fake_pairs = pad_to_multiple(frame_pairs(pred_prev, pred_cur))
    d_loss_value = None
    if adv_on:
        _, d_loss = adversarial_losses(disc(fake_pairs.detach()), disc(real_pairs))
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("adv_d", state.step)
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        state.opt_d.step()
        d_loss_value = float(d_loss.detach())

    # generator terms
    pred_rgb = lab_tensor_to_rgb(pred_cur)
    gt_rgb = lab_tensor_to_rgb(batch.cur_lab)
    terms = {"perc": perceptual_loss(pred_rgb, gt_rgb, model.backbone)}
    clean_ref_pyr = model.backbone(lab_tensor_to_rgb(batch.ref_lab))
    terms["context"] = contextual_loss(model.backbone(pred_rgb), clean_ref_pyr, w.context_level_weights,
                                       w.h, w.eps, w.context_max_rows, gen)
    terms["smooth"] = 0.5 * (
        smoothness_loss(ab_prev, l_prev, w.wls_sigma, w.smooth_norm)
        + smoothness_loss(ab_cur, l_cur, w.wls_sigma, w.smooth_norm)
    )
    terms["temporal"] = temporal_loss(ab_prev, ab_cur, batch.flow, batch.mask, w.temporal_norm)
    if adv_on:
        with torch.no_grad():
            real_scores = disc(real_pairs)
        terms["adv"], _ = adversarial_losses(disc(fake_pairs), real_scores)
    else:
        terms["adv"] = ab_cur.sum() * 0.0
    use_l1 = bool(batch.same_scene.any())
    if use_l1:
        sel = batch.same_scene
        terms["l1"] = 0.5 * (l1_loss(ab_prev[sel], batch.prev_lab[sel, 1:]) + l1_loss(ab_cur[sel], batch.cur_lab[sel, 1:]))
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, state.step)

    eff = w if adv_on else LossWeights(**{**w.__dict__, "lambda_adv": 0.0})
    report = total_loss(terms, eff, use_l1)
    state.opt_g.zero_grad(set_to_none=True)
    report.total.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
    if norm > cfg.grad_clip:
        log.info("step %d: generator gradient norm %.3f clipped to %.1f", state.step, float(norm), cfg.grad_clip)
    state.opt_g.step()
    state.step += 1

    out = LossReport({k: float(v.detach()) for k, v in report.terms.items()}, report.weights,
                     float(report.total.detach()))
    if d_loss_value is not None:
        out.terms["adv_d"] = d_loss_value
    return state, out


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    arrays = {}
    arrays.update(module_arrays(state.model.correspondence, "corr"))
    arrays.update(module_arrays(state.model.colornet, "color"))
    arrays.update(module_arrays(state.disc, "disc"))
    og, og_head = optimizer_arrays(state.opt_g, "opt_g")
    od, od_head = optimizer_arrays(state.opt_d, "opt_d")
    arrays.update(og)
    arrays.update(od)
    meta = {
        "kind": "training",
        "step": state.step,
        "config": state.config.to_dict(),
        "opt_g": og_head,
        "opt_d": od_head,
    }
    save_named_arrays(path, arrays, meta)


def load_checkpoint(path, config_override: TrainConfig | None = None) -> TrainState:
    arrays, meta = load_named_arrays(path)
    if meta.get("kind") != "training":
        raise ValueError(f"{path} is not a training checkpoint")
    config = config_override or TrainConfig.from_dict(meta["config"])
    state = build_state(config)
    load_module_arrays(state.model.correspondence, arrays, "corr")
    load_module_arrays(state.model.colornet, arrays, "color")
    load_module_arrays(state.disc, arrays, "disc")
    load_optimizer_arrays(state.opt_g, arrays, meta["opt_g"], "opt_g")
    load_optimizer_arrays(state.opt_d, arrays, meta["opt_d"], "opt_d")
    state.step = int(meta["step"])
    return state


def load_model(path) -> VideoColorizer:
    """Inference model from a training checkpoint."""
    state = load_checkpoint(path)
    state.model.eval()
    return state.model


def latest_checkpoint(directory) -> str | None:
    best, best_step = None, -1
    for p in glob.glob(os.path.join(directory, "ckpt_*.npz")):
        m = re.search(r"ckpt_(\d+)\.npz$", p)
        if m and int(m.group(1)) > best_step:
            best, best_step = p, int(m.group(1))
    return best


# --- training loop ---------------------------------------------------------------------


class ManifestData:
    """Manifest samples with a seeded per-epoch batch order."""

    def __init__(self, manifest, batch_size: int, seed: int):
        self.records = read_manifest(manifest)
        if not self.records:
            raise ValueError(f"manifest {manifest} lists no samples")
        self.batch_size = min(batch_size, len(self.records))
        self.seed = seed
        self._cache: dict[int, ClipSample] = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.records) / self.batch_size)

    def sample(self, i: int) -> ClipSample:
        if i not in self._cache:
            self._cache[i] = load_sample(self.records[i])
        return self._cache[i]

    def batch_for_step(self, step: int) -> Batch:
        epoch, b = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.records))
        idx = order[b * self.batch_size : (b + 1) * self.batch_size]
        return Batch.collate([self.sample(int(i)) for i in idx])


def total_steps(config: TrainConfig, steps_per_epoch: int) -> int:
    return config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch


def train(config: TrainConfig, resume: bool = True, dry_run: bool = False, progress=None):
    """Run (or resume) training; returns ``(state, reports)``.

    Writes ``ckpt_%07d.npz`` every ``checkpoint_every`` steps and at the end,
    and one JSON log line per step to ``train_log.jsonl``.
    """
    config.validate()
    data = ManifestData(config.manifest, config.batch_size, config.seed)
    state = None
    if resume and not dry_run:
        ckpt = latest_checkpoint(config.checkpoint_dir)
        if ckpt:
            log.info("resuming from %s", ckpt)
            state = load_checkpoint(ckpt, config)
    if state is None:
        state = build_state(config)
    spe = data.steps_per_epoch

    if dry_run:
        batch = data.batch_for_step(0)
        with torch.no_grad():
            state.model.eval()
            ref = state.model.encode_reference(batch.ref_lab, size=batch.prev_lab.shape[-2:])
            state.model.frame_step(batch.prev_lab[:, :1], ref, None)
            state.disc.eval()
            state.disc(pad_to_multiple(frame_pairs(batch.prev_lab, batch.cur_lab)))
        return state, []

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(config.checkpoint_dir, "train_log.jsonl")
    n_total = total_steps(config, spe)
    reports = []
    with open(log_path, "a") as log_fh:
        while state.step < n_total:
            step = state.step
            state, report = train_step(data.batch_for_step(step), state, spe)
            reports.append(report)
            if step % config.log_every == 0:
                log_fh.write(report.log_line(step) + "\n")
                log_fh.flush()
            if progress:
                progress(step, report)
            if state.step % config.checkpoint_every == 0 or state.step == n_total:
                save_checkpoint(state, os.path.join(config.checkpoint_dir, f"ckpt_{state.step:07d}.npz"))
    return state, reports
