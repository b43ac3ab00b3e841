"""Warp a reference's colors onto a block-shuffled copy of itself.

The correspondence stage never sees the target's colors: it matches
luminance features against the reference and copies chrominance through a
sharp softmax. Shuffling 128-pixel blocks makes the answer known, so the
warped chrominance can be scored directly.

    python demos/warp_reference.py [--out warped.png]
"""

import argparse

import numpy as np
import torch

from vidcolor.colorio import LabFrame, lab_to_rgb, write_rgb
from vidcolor.backbone import toy_backbone
from vidcolor.correspondence import CorrespondenceNet, align_reference
from vidcolor.synthetic import procedural_frame


def shuffle_blocks(frame, block, seed):
    rng = np.random.default_rng(seed)
    h, w = frame.shape
    tiles = [(r, c) for r in range(0, h, block) for c in range(0, w, block)]
    # a random cyclic shift of a random ordering, so no block stays in place
    perm = rng.permutation(len(tiles))
    order = np.empty_like(perm)
    order[perm] = np.roll(perm, 1)
    l, ab = np.empty_like(frame.l), np.empty_like(frame.ab)
    for (r, c), k in zip(tiles, order):
        sr, sc = tiles[k]
        l[r:r + block, c:c + block] = frame.l[sr:sr + block, sc:sc + block]
        ab[r:r + block, c:c + block] = frame.ab[sr:sr + block, sc:sc + block]
    return LabFrame(l, ab)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None, help="write target | warped | reference side by side")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ref = procedural_frame(args.seed, (256, 256), n_cells=40)
    target = shuffle_blocks(ref, 128, args.seed + 1)
    bb = toy_backbone(0)

    # untrained fusion layers with the residual stack removed: matching then rests
    # on the frozen backbone features, and the reference is described by its
    # luminance like the target
    torch.manual_seed(0)
    net = CorrespondenceNet(bb.level_channels, width=32).eval()
    net.resblocks = torch.nn.Identity()
    res = align_reference(net, bb, target.gray(), ref, reference_color_features=False)

    g = 256 // 4
    truth = torch.nn.functional.adaptive_avg_pool2d(torch.from_numpy(target.ab.transpose(2, 0, 1))[None], (g, g))
    truth = truth[0].permute(1, 2, 0).numpy()
    err = np.abs(res.warped_ab - truth)
    inner = np.zeros((g, g), bool)
    for r in range(0, g, 32):
        for c in range(0, g, 32):
            inner[r + 8:r + 24, c + 8:c + 24] = True
    print(f"mean confidence {res.confidence.mean():.3f}")
    print(f"mean |warped ab - true ab|: block interiors {err[inner].mean():.4f}, everywhere {err.mean():.4f}")

    if args.out:
        up = torch.nn.functional.interpolate(torch.from_numpy(res.warped_ab.transpose(2, 0, 1))[None],
                                             size=(256, 256), mode="bilinear", align_corners=False)
        ab = up[0].permute(1, 2, 0).numpy()
        panels = [lab_to_rgb(target.gray()), lab_to_rgb(LabFrame(target.l, np.clip(ab, -1, 1))), lab_to_rgb(ref)]
        write_rgb(args.out, np.concatenate(panels, axis=1))
        print("wrote", args.out)


if __name__ == "__main__":
    main()
