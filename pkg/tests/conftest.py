import json
import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_RESULTS = []


def record(name, passed, detail=""):
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")


def fd_rel_error(fn, x, step=1e-3, mask=None):
    """Compare autograd with central differences of scalar ``fn`` at ``x``.

    Returns max|fd - grad| / max|grad| over the entries selected by ``mask``.
    """
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    flat = x.detach().clone().view(-1)
    idx = torch.arange(flat.numel()) if mask is None else torch.nonzero(mask.reshape(-1)).view(-1)
    fd = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for n, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn(flat.view_as(x)).item()
            flat[i] = orig - step
            down = fn(flat.view_as(x)).item()
            flat[i] = orig
            fd[n] = (up - down) / (2 * step)
    an = grad.reshape(-1)[idx]
    return float((fd - an).abs().max() / an.abs().max().clamp_min(1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    from vidcolor.backbone import toy_backbone

    return toy_backbone(seed=0)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Train the 1/4-width model on 8 same-scene augmented samples for 200 steps.

    Shared by the acceptance and CLI tests; runs once per session.
    """
    import time

    from vidcolor.colorio import write_rgb
    from vidcolor.datapipe import DatasetConfig, build_dataset
    from vidcolor.losses import LossWeights
    from vidcolor.synthetic import procedural_rgb
    from vidcolor.training import TrainConfig, train

    root = tmp_path_factory.mktemp("overfit")
    img_dir = root / "images"
    img_dir.mkdir()
    for i in range(8):
        write_rgb(str(img_dir / f"img_{i}.png"), procedural_rgb(100 + i, (128, 224)))
    manifest = build_dataset(str(img_dir), None, str(root / "data"), DatasetConfig(same_scene_fraction=1.0, seed=0))
    cfg = TrainConfig(
        manifest=manifest,
        batch_size=2,
        max_steps=200,
        adv_warmup_steps=200,
        checkpoint_dir=str(root / "ckpt"),
        checkpoint_every=200,
        weights=LossWeights(context_max_rows=512),
    )
    t0 = time.time()
    state, reports = train(cfg)
    elapsed = time.time() - t0
    with open(root / "summary.json", "w") as fh:
        json.dump({"elapsed": elapsed, "totals": [r.total for r in reports]}, fh)
    return {
        "root": root,
        "manifest": manifest,
        "checkpoint": os.path.join(cfg.checkpoint_dir, "ckpt_0000200.npz"),
        "reports": reports,
        "elapsed": elapsed,
        "state": state,
    }
