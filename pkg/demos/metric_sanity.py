"""The evaluation metrics on inputs with known answers.

    python demos/metric_sanity.py
"""

import numpy as np

from vidcolor.colorio import FlowField, LabFrame, lab_to_rgb
from vidcolor.metrics import colorfulness, frechet_distance, psnr, temporal_flicker
from vidcolor.synthetic import procedural_frame

rng = np.random.default_rng(0)

frame = procedural_frame(1, (96, 160))
print("colorfulness, colored frame :", round(colorfulness(lab_to_rgb(frame) * 255), 3))
gray = np.repeat(frame.l[..., None] * 255, 3, axis=-1)
print("colorfulness, gray image   :", colorfulness(gray))

# a clip whose chrominance drifts by 0.02 per frame flickers by 0.01 * 255 per frame on average
drift = [LabFrame(frame.l, np.clip(frame.ab + 0.02 * t, -1, 1)) for t in range(4)]
print("flicker, static clip  :", round(temporal_flicker([frame] * 4, [FlowField.zeros(96, 160)] * 3), 6))
print("flicker, drifting clip:", round(temporal_flicker(drift, [FlowField.zeros(96, 160)] * 3), 3))

gt = rng.uniform(0, 1, (64, 64, 3))
for sigma in (0.01, 0.05):
    print(f"psnr at noise {sigma}: {psnr(gt + rng.normal(0, sigma, gt.shape), gt):.2f} dB "
          f"(expected {-10 * np.log10(sigma ** 2):.2f})")

a, b = rng.normal(0, 1, 20_000), rng.normal(1, 1, 20_000)
print("Frechet distance N(0,1) vs N(1,1):", round(frechet_distance(a, b), 4), "(expected 1)")
