"""End to end at toy scale: build a dataset, train a few steps, colorize a clip.

Everything runs on CPU in a temporary directory and uses the same entry
points as the command line tool. Expect colors to be poor after a handful of
steps; the point is the plumbing and the logged loss terms.

    python demos/tiny_training.py --steps 10
"""

import argparse
import json
import os
import tempfile

from vidcolor.cli import main as cli
from vidcolor.colorio import lab_to_rgb, read_frame_sequence, write_frame_sequence, write_rgb
from vidcolor.datapipe import load_sample, read_manifest
from vidcolor.synthetic import procedural_rgb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--workdir", default=None)
    args = ap.parse_args()
    work = args.workdir or tempfile.mkdtemp(prefix="vidcolor_demo_")
    img = os.path.join(work, "images")
    os.makedirs(img, exist_ok=True)
    for i in range(4):
        write_rgb(os.path.join(img, f"img_{i}.png"), procedural_rgb(i, (128, 224)))

    cli(["make-dataset", "--images", img, "--out", os.path.join(work, "data"), "--same-scene-fraction", "1"])
    manifest = os.path.join(work, "data", "manifest.jsonl")
    cfg = {"manifest": manifest, "batch_size": 2, "max_steps": args.steps, "width_scale": 0.25,
           "checkpoint_dir": os.path.join(work, "ckpt"), "weights": {"context_max_rows": 256}}
    with open(os.path.join(work, "train.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)
    cli(["train", "--config", os.path.join(work, "train.json")])

    with open(os.path.join(work, "ckpt", "train_log.jsonl")) as fh:
        log = [json.loads(x) for x in fh]
    print("step  total   l1      context")
    for row in log:
        print(f"{row['step']:4d}  {row['total']:.3f}  {row['l1']:.3f}  {row['context']:.3f}")

    # colorize one training pair as a 2-frame clip, scoring against the ground truth
    s = load_sample(read_manifest(manifest)[0])
    write_frame_sequence([s.frame_prev.gray(), s.frame_cur.gray()], os.path.join(work, "clip"))
    write_frame_sequence([s.frame_prev, s.frame_cur], os.path.join(work, "gt"))
    write_rgb(os.path.join(work, "ref.png"), lab_to_rgb(s.reference))
    ckpt = os.path.join(work, "ckpt", f"ckpt_{args.steps:07d}.npz")
    cli(["colorize", "--input", os.path.join(work, "clip"), "--reference", os.path.join(work, "ref.png"),
         "--checkpoint", ckpt, "--out", os.path.join(work, "out"), "--gt", os.path.join(work, "gt")])
    cli(["eval", "--pred", os.path.join(work, "out"), "--gt", os.path.join(work, "gt")])
    print("outputs in", work, "-", len(read_frame_sequence(os.path.join(work, "out"))), "frames")


if __name__ == "__main__":
    main()
