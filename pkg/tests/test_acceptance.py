"""One test per acceptance criterion; each prints a PASS/FAIL line with the measured values."""

import os
import time

import numpy as np
import pytest
import torch

from conftest import fd_rel_error, record
from vidcolor.backbone import toy_backbone
from vidcolor.colorio import (
    FlowField,
    LabFrame,
    VideoClip,
    read_flow,
    read_frame_sequence,
    read_lab,
    write_flow,
    write_frame_sequence,
    write_lab,
)
from vidcolor.correspondence import correlate, correlate_reference, warp_colors
from vidcolor.datapipe import AugmentParams, augment_image_to_pair, geometric_only, load_sample, read_manifest
from vidcolor.losses import (
    adversarial_losses,
    contextual_level,
    l1_loss,
    perceptual_loss,
    smoothness_loss,
    temporal_loss,
    warp_by_flow,
)
from vidcolor.metrics import colorfulness, frechet_distance, psnr
from vidcolor.pipeline import ab_psnr, colorize_clip
from vidcolor.synthetic import procedural_frame
from vidcolor.training import TrainConfig, build_state, load_model, save_checkpoint, train_step

D = torch.float64


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def test_warp_argmax_convergence():
    t0 = time.time()
    g = _gen(0)
    errs, rows = [], 0
    for _ in range(200):
        fx = torch.randn(1, 16, 6, 6, generator=g, dtype=D)
        fy = torch.randn(1, 16, 6, 6, generator=g, dtype=D)
        m = correlate(fx, fy)  # 36 x 36
        ref = torch.rand(1, 36, 2, generator=g, dtype=D) * 2 - 1
        top = m.topk(2, dim=-1).values[0]
        ok = (top[:, 0] - top[:, 1]) >= 0.05
        oracle = ref[0][m[0].argmax(-1)]
        errs.append((warp_colors(m, ref)[0] - oracle).abs()[ok])
        rows += int(ok.sum())
    err = torch.cat(errs)
    elapsed = time.time() - t0
    passed = float(err.mean()) < 1e-3 and elapsed < 5
    record("warp-argmax convergence", passed,
           f"mean |warp - argmax| {float(err.mean()):.2e} over {rows} rows with margin>=0.05 "
           f"(worst row {float(err.max()):.2e}); {elapsed:.2f}s")
    assert passed


def test_convex_combination_bound():
    t0 = time.time()
    g = _gen(1)
    worst = -np.inf
    for _ in range(100):
        p, q = int(torch.randint(1, 50, (1,), generator=g)), int(torch.randint(1, 50, (1,), generator=g))
        m = torch.rand(1, p, q, generator=g, dtype=D) * 2 - 1
        ref = torch.rand(1, q, 2, generator=g, dtype=D) * 2 - 1
        out = warp_colors(m, ref, tau=float(torch.rand(1, generator=g)) * 0.1 + 1e-3)[0]
        lo, hi = ref[0].min(0).values, ref[0].max(0).values
        worst = max(worst, float((lo - out).max()), float((out - hi).max()))
    elapsed = time.time() - t0
    passed = worst <= 1e-6 and elapsed < 5
    record("convex-combination bound", passed, f"max excursion {worst:.2e}; {elapsed:.2f}s")
    assert passed


def test_gradient_suite():
    t0 = time.time()
    errors = {}
    g = _gen(2)
    bb = toy_backbone(0).double()
    gt = torch.rand(1, 3, 32, 32, generator=g, dtype=D)
    x = torch.rand(1, 3, 32, 32, generator=g, dtype=D)
    window = torch.zeros_like(x, dtype=torch.bool)
    window[..., 12:20, 12:20] = True
    errors["perceptual"] = fd_rel_error(lambda p: perceptual_loss(p, gt, bb), x, step=1e-5, mask=window)
    fx, fy = torch.randn(1, 6, 4, 4, generator=g, dtype=D), torch.randn(1, 6, 4, 4, generator=g, dtype=D)
    errors["contextual"] = fd_rel_error(lambda f: contextual_level(f, fy), fx)
    guide = torch.rand(1, 1, 6, 6, generator=g, dtype=D)
    errors["smoothness"] = fd_rel_error(lambda a: smoothness_loss(a, guide),
                                        torch.rand(1, 2, 6, 6, generator=g, dtype=D) * 2 - 1)
    fake, real = torch.randn(8, generator=g, dtype=D), torch.randn(8, generator=g, dtype=D)
    errors["adversarial (G, fake)"] = fd_rel_error(lambda f: adversarial_losses(f, real)[0], fake)
    errors["adversarial (G, real)"] = fd_rel_error(lambda r: adversarial_losses(fake, r)[0], real)
    errors["adversarial (D, fake)"] = fd_rel_error(lambda f: adversarial_losses(f, real)[1], fake)
    errors["adversarial (D, real)"] = fd_rel_error(lambda r: adversarial_losses(fake, r)[1], real)
    prev = torch.rand(1, 2, 8, 8, generator=g, dtype=D)
    cur = torch.rand(1, 2, 8, 8, generator=g, dtype=D)
    flow = (torch.rand(1, 2, 8, 8, generator=g, dtype=D) - 0.5) * 2
    mask = (torch.rand(1, 1, 8, 8, generator=g) > 0.2).to(D)
    errors["temporal"] = max(fd_rel_error(lambda p: temporal_loss(p, cur, flow, mask), prev),
                             fd_rel_error(lambda c: temporal_loss(prev, c, flow, mask), cur))
    target = torch.rand(1, 2, 8, 8, generator=g, dtype=D)
    offset = (torch.rand(1, 2, 8, 8, generator=g, dtype=D) * 0.2 + 0.05) * torch.sign(torch.randn(1, 2, 8, 8, generator=g, dtype=D))
    errors["l1"] = fd_rel_error(lambda p: l1_loss(p, target), target + offset)
    weights = torch.rand(1, 2, 8, 8, generator=g, dtype=D)
    errors["warp_by_flow"] = fd_rel_error(lambda f: (warp_by_flow(f, flow) * weights).sum(), prev)
    elapsed = time.time() - t0
    worst = max(errors.values())
    passed = worst < 1e-3 and elapsed < 120
    record("gradient suite", passed,
           ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f}s")
    assert passed


def test_correlation_oracle_and_speed():
    t0 = time.time()
    g = _gen(3)
    worst = 0.0
    for _ in range(5):
        fx = torch.randn(1, 8, 6, 6, generator=g, dtype=D)
        fy = torch.randn(1, 8, 6, 6, generator=g, dtype=D)
        ref = correlate_reference(fx[0].reshape(8, -1).T.numpy(), fy[0].reshape(8, -1).T.numpy())
        worst = max(worst, float(np.abs(correlate(fx, fy)[0].numpy() - ref).max()))
    fx = torch.randn(1, 16, 27, 48, generator=g)
    fy = torch.randn(1, 16, 27, 48, generator=g)
    a, b = fx[0].reshape(16, -1).T.numpy(), fy[0].reshape(16, -1).T.numpy()
    ts = time.perf_counter()
    slow = correlate_reference(a, b)
    t_loop = time.perf_counter() - ts
    ts = time.perf_counter()
    fast = correlate(fx, fy)
    t_blocked = time.perf_counter() - ts
    speedup = t_loop / t_blocked
    big_err = float(np.abs(fast[0].double().numpy() - slow).max())
    elapsed = time.time() - t0
    passed = worst < 1e-5 and speedup >= 10 and big_err < 1e-5 and elapsed < 60
    record("correlation oracle", passed,
           f"6x6 max err {worst:.1e}; 48x27 err {big_err:.1e}, loop {t_loop:.1f}s vs blocked {t_blocked * 1e3:.1f}ms "
           f"({speedup:.0f}x); {elapsed:.1f}s")
    assert passed


def test_analytic_flow_consistency():
    t0 = time.time()
    rng = np.random.default_rng(4)
    image = procedural_frame(11, (160, 256))
    errs = []
    for _ in range(50):
        params = geometric_only(AugmentParams.sample(rng, 192))
        s = augment_image_to_pair(image, params)
        prev = s.frame_prev.to_tensor(D)[:, 1:]
        cur = s.frame_cur.to_tensor(D)[:, 1:]
        mask = s.mask.to_tensor(D)
        warped = warp_by_flow(prev, s.flow_fwd.to_tensor(D))
        errs.append(float(((warped - cur).abs() * mask).sum() / (2 * mask.sum())))
    elapsed = time.time() - t0
    passed = max(errs) < 2e-2 and elapsed < 30
    record("analytic-flow consistency", passed,
           f"masked mean abs ab error max {max(errs):.4f}, mean {np.mean(errs):.4f} over 50 samples; {elapsed:.1f}s")
    assert passed


def test_temporal_loss_zero_case():
    t0 = time.time()
    g = _gen(5)
    prev = torch.rand(2, 2, 16, 16, generator=g, dtype=D)
    flow = (torch.rand(2, 2, 16, 16, generator=g, dtype=D) - 0.5) * 6
    cur = warp_by_flow(prev, flow)
    full = float(temporal_loss(prev, cur, flow, torch.ones(2, 1, 16, 16, dtype=D)))
    zero = float(temporal_loss(prev, torch.rand(2, 2, 16, 16, generator=g, dtype=D), flow,
                               torch.zeros(2, 1, 16, 16, dtype=D)))
    elapsed = time.time() - t0
    passed = full < 1e-6 and zero == 0.0 and elapsed < 1
    record("temporal-loss zero case", passed, f"full mask {full:.1e}, empty mask {zero}; {elapsed:.3f}s")
    assert passed


def _recolorize_psnr(model, manifest):
    values = []
    for rec in read_manifest(manifest):
        s = load_sample(rec)
        clip = VideoClip([s.frame_prev.gray(), s.frame_cur.gray()])
        out = colorize_clip(model, clip, s.reference)
        values.append(np.mean([ab_psnr(o.ab, t.ab) for o, t in zip(out, (s.frame_prev, s.frame_cur))]))
    return values


def test_overfit_run(overfit_run):
    totals = [r.total for r in overfit_run["reports"]]
    ratio = totals[-1] / totals[5]
    model = load_model(overfit_run["checkpoint"])
    values = _recolorize_psnr(model, overfit_run["manifest"])
    elapsed = overfit_run["elapsed"]
    l1 = [r.terms["l1"] for r in overfit_run["reports"]]
    ok_ratio, ok_psnr, ok_time = ratio <= 0.5, float(np.mean(values)) >= 25, elapsed < 20 * 60
    record("overfit run", ok_ratio and ok_psnr and ok_time,
           f"total loss step5 {totals[5]:.3f} -> step200 {totals[-1]:.3f} (ratio {ratio:.2f}, "
           f"{'ok' if ok_ratio else 'FAIL'}); recolorized ab-PSNR mean {np.mean(values):.2f} dB "
           f"(min {min(values):.2f}, {'ok' if ok_psnr else 'FAIL'} vs 25); l1 {l1[0]:.3f} -> {l1[-1]:.3f}; "
           f"train {elapsed / 60:.1f} min")
    assert ok_ratio, f"loss ratio {ratio:.2f} > 0.5"
    assert ok_time
    assert ok_psnr, f"ab-PSNR {np.mean(values):.2f} dB < 25"


def test_exemplar_sensitivity(overfit_run, tmp_path):
    from vidcolor.cli import cmd_colorize

    t0 = time.time()
    recs = read_manifest(overfit_run["manifest"])
    s = load_sample(recs[0])
    write_frame_sequence([s.frame_prev.gray(), s.frame_cur.gray()], str(tmp_path / "in"))
    outs = []
    for i, rec in enumerate((recs[0], recs[-1])):
        opts = {"input": str(tmp_path / "in"), "reference": rec.reference, "checkpoint": overfit_run["checkpoint"],
                "out": str(tmp_path / f"out{i}"), "init_prev": "zero", "corpus": None, "memory_budget_mb": 512,
                "gt": None}
        cmd_colorize(opts, out=lambda *_: None)
        outs.append(read_frame_sequence(opts["out"]))
    diff = float(np.mean([np.abs(a.ab - b.ab).mean() for a, b in zip(*outs)]))
    elapsed = time.time() - t0
    passed = diff > 0.01 and elapsed < 60
    record("exemplar sensitivity", passed, f"mean |ab_1 - ab_2| {diff:.4f}; {elapsed:.1f}s")
    assert passed


def test_metrics_oracles():
    t0 = time.time()
    rng = np.random.default_rng(6)
    v = rng.uniform(0, 255, (32, 32))
    gray_cf = colorfulness(np.stack([v, v, v], -1))
    x = rng.normal(size=(300, 5))
    fid_same = frechet_distance(x, x)
    a, b = rng.normal(0, 1, 10_000), rng.normal(1, 1, 10_000)
    fid_1d = frechet_distance(a, b)
    gt = rng.uniform(0, 1, (128, 128, 3))
    sigma = 0.02
    pred = gt + rng.normal(0, sigma, gt.shape)
    p_err = abs(psnr(pred, gt) - (-10 * np.log10(sigma**2)))
    elapsed = time.time() - t0
    passed = gray_cf == 0.0 and abs(fid_same) <= 1e-6 and abs(fid_1d - 1.0) <= 0.05 and p_err <= 0.1 and elapsed < 60
    record("metrics oracles", passed,
           f"gray colorfulness {gray_cf}, FID(x,x) {fid_same:.1e}, 1-D FID {fid_1d:.4f} vs 1, "
           f"PSNR error {p_err:.3f} dB; {elapsed:.2f}s")
    assert passed


def test_determinism_and_persistence(tmp_path):
    from vidcolor.colorio import write_rgb
    from vidcolor.datapipe import DatasetConfig, build_dataset
    from vidcolor.losses import LossWeights
    from vidcolor.synthetic import procedural_rgb
    from vidcolor.training import ManifestData

    t0 = time.time()
    (tmp_path / "img").mkdir()
    for i in range(2):
        write_rgb(str(tmp_path / "img" / f"{i}.png"), procedural_rgb(i, (80, 112)))
    manifest = build_dataset(str(tmp_path / "img"), None, str(tmp_path / "d"),
                             DatasetConfig(crop=(64, 96), same_scene_fraction=1.0))
    cfg = TrainConfig(manifest=manifest, batch_size=2, width_scale=0.125, adv_warmup_steps=0,
                      weights=LossWeights(context_max_rows=64))
    batch = ManifestData(manifest, 2, 0).batch_for_step(0)
    runs = []
    for _ in range(2):
        state = build_state(cfg)
        state, rep = train_step(batch, state)
        runs.append((rep.total, {k: v.clone() for k, v in state.model.colornet.state_dict().items()}, state))
    step_same = runs[0][0] == runs[1][0] and all(torch.equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    state = runs[0][2]
    save_checkpoint(state, str(tmp_path / "c.npz"))
    loaded = load_model(str(tmp_path / "c.npz"))
    state.model.eval()
    x_l = batch.cur_lab[:1, :1]
    with torch.no_grad():
        a = state.model(x_l, batch.ref_lab[:1])
        b = loaded(x_l, batch.ref_lab[:1])
    ckpt_same = torch.equal(a, b)

    frame = procedural_frame(3, (20, 30))
    write_lab(str(tmp_path / "f.png"), frame)
    once = read_lab(str(tmp_path / "f.png"))
    write_lab(str(tmp_path / "g.png"), once)
    twice = read_lab(str(tmp_path / "g.png"))
    frame_same = np.array_equal(once.l, twice.l) and np.array_equal(once.ab, twice.ab)
    flow = FlowField(np.random.default_rng(0).normal(size=(7, 9)).astype(np.float32),
                     np.random.default_rng(1).normal(size=(7, 9)).astype(np.float32))
    write_flow(str(tmp_path / "f.flo"), flow)
    back = read_flow(str(tmp_path / "f.flo"))
    flo_same = np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)
    elapsed = time.time() - t0
    passed = step_same and ckpt_same and frame_same and flo_same and elapsed < 120
    record("determinism and persistence", passed,
           f"train_step bitwise {step_same}, checkpoint forward bitwise {ckpt_same}, "
           f"frame round trip {frame_same}, .flo round trip {flo_same}; {elapsed:.1f}s")
    assert passed
