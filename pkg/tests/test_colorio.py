import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage import color as skcolor

from vidcolor.colorio import (
    FlowField,
    FlowFormatError,
    FrameSequenceError,
    LabFrame,
    OcclusionMask,
    VideoClip,
    lab_tensor_to_rgb,
    lab_to_rgb,
    read_flow,
    read_frame_sequence,
    read_mask,
    rgb_to_lab,
    write_flow,
    write_frame_sequence,
    write_mask,
    write_rgb,
)


def test_black_and_white():
    black = rgb_to_lab(np.zeros((4, 5, 3)))
    assert np.all(black.l == 0) and np.all(black.ab == 0)
    white = rgb_to_lab(np.ones((4, 5, 3)))
    assert np.allclose(white.l, 1.0, atol=1e-6)
    assert np.abs(white.ab).max() < 1e-3


def test_pure_red_matches_hand_colorimetry():
    # sRGB red: linear (1,0,0) -> XYZ = first column of the sRGB matrix
    X, Y, Z = 0.4124564, 0.2126729, 0.0193339
    Xn, Yn, Zn = 0.95047, 1.0, 1.08883

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    L = 116 * f(Y / Yn) - 16
    a = 500 * (f(X / Xn) - f(Y / Yn))
    b = 200 * (f(Y / Yn) - f(Z / Zn))
    lab = rgb_to_lab(np.array([[[1.0, 0.0, 0.0]]]))
    assert lab.l[0, 0] == pytest.approx(L / 100, abs=1e-6)
    assert lab.ab[0, 0, 0] == pytest.approx(a / 127, abs=1e-6)
    assert lab.ab[0, 0, 1] == pytest.approx(b / 127, abs=1e-6)
    assert L == pytest.approx(53.24, abs=0.01)


def test_agrees_with_skimage(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    ours = rgb_to_lab(img)
    ref = skcolor.rgb2lab(img, illuminant="D65")
    assert np.allclose(ours.l * 100, ref[..., 0], atol=0.05)
    assert np.allclose(np.clip(ref[..., 1:] / 127, -1, 1), ours.ab, atol=0.05 / 127 + 1e-3)


def test_rejects_bad_input():
    bad = np.zeros((2, 2, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        rgb_to_lab(bad)
    with pytest.raises(ValueError):
        rgb_to_lab(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        LabFrame(np.zeros((2, 2)), np.zeros((3, 2, 2)))


def test_neutral_gray_renders_gray():
    rgb = lab_to_rgb(LabFrame(np.full((3, 3), 0.5), np.zeros((3, 3, 2))))
    assert np.abs(rgb[..., 0] - rgb[..., 1]).max() < 1 / 255
    assert np.abs(rgb[..., 1] - rgb[..., 2]).max() < 1 / 255


def test_saturated_ab_clamps():
    rgb = lab_to_rgb(LabFrame(np.full((2, 2), 0.5), np.ones((2, 2, 2))))
    assert rgb.min() >= 0 and rgb.max() <= 1


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 7, 3), elements=st.floats(0, 1)))
def test_round_trip_property(img):
    back = lab_to_rgb(rgb_to_lab(img))
    assert np.abs(back - img).max() <= 1 / 255


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
def test_gray_maps_to_zero_ab(g):
    lab = rgb_to_lab(np.repeat(g[..., None], 3, axis=2))
    assert np.abs(lab.ab).max() < 1e-3


def test_tensor_render_matches_numpy(rng):
    frame = rgb_to_lab(rng.uniform(0, 1, (8, 8, 3)))
    t = lab_tensor_to_rgb(frame.to_tensor(torch.float64))[0].permute(1, 2, 0).numpy()
    assert np.abs(t - lab_to_rgb(frame)).max() < 1e-6


def test_tensor_round_trip(rng):
    frame = rgb_to_lab(rng.uniform(0, 1, (4, 6, 3)))
    back = LabFrame.from_tensor(frame.to_tensor(torch.float64))
    assert np.array_equal(back.l, frame.l) and np.array_equal(back.ab, frame.ab)


def _write_frames(d, n, rng, size=(6, 8)):
    os.makedirs(d, exist_ok=True)
    imgs = [rng.integers(0, 256, (*size, 3)).astype(np.float64) / 255 for _ in range(n)]
    for i, im in enumerate(imgs):
        write_rgb(os.path.join(d, f"frame_{i:05d}.png"), im)
    return imgs


def test_sequence_read(tmp_path, rng):
    _write_frames(tmp_path, 3, rng)
    assert len(read_frame_sequence(tmp_path)) == 3


def test_sequence_gap_names_index(tmp_path, rng):
    _write_frames(tmp_path, 3, rng)
    os.remove(tmp_path / "frame_00001.png")
    with pytest.raises(FrameSequenceError, match="index 1"):
        read_frame_sequence(tmp_path)


def test_sequence_mixed_sizes(tmp_path, rng):
    _write_frames(tmp_path, 2, rng)
    write_rgb(str(tmp_path / "frame_00002.png"), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        read_frame_sequence(tmp_path)


def test_sequence_round_trip_bit_exact(tmp_path, rng):
    from PIL import Image

    imgs = _write_frames(tmp_path / "a", 3, rng)
    clip = read_frame_sequence(tmp_path / "a")
    write_frame_sequence(clip, tmp_path / "b")
    for i, im in enumerate(imgs):
        got = np.asarray(Image.open(tmp_path / "b" / f"frame_{i:05d}.png"))
        assert np.array_equal(got, np.round(im * 255).astype(np.uint8))


def test_flow_round_trip(tmp_path):
    xs = np.tile(np.arange(7, dtype=np.float32), (5, 1))
    write_flow(tmp_path / "f.flo", FlowField(xs, np.zeros_like(xs)))
    back = read_flow(tmp_path / "f.flo")
    assert np.array_equal(back.u, xs) and np.array_equal(back.v, np.zeros_like(xs))


def test_zero_flow_file(tmp_path):
    write_flow(tmp_path / "z.flo", FlowField.zeros(2, 2))
    assert np.all(read_flow(tmp_path / "z.flo").u == 0)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.flo"
    with open(p, "wb") as fh:
        np.array([0.0], np.float32).tofile(fh)
        np.array([2, 2], np.int32).tofile(fh)
        np.zeros(8, np.float32).tofile(fh)
    with pytest.raises(FlowFormatError):
        read_flow(p)


def test_truncated_flow(tmp_path):
    p = tmp_path / "t.flo"
    with open(p, "wb") as fh:
        np.array([202021.25], np.float32).tofile(fh)
        np.array([4, 4], np.int32).tofile(fh)
        np.zeros(5, np.float32).tofile(fh)
    with pytest.raises(FlowFormatError, match="truncated"):
        read_flow(p)


def test_mask_round_trip(tmp_path, rng):
    m = OcclusionMask(rng.integers(0, 2, (5, 9)))
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png").m, m.m)


def test_containers_validate():
    with pytest.raises(ValueError):
        VideoClip([])
    with pytest.raises(ValueError):
        OcclusionMask(np.full((2, 2), 2))
    with pytest.raises(ValueError):
        FlowField(np.full((2, 2), np.inf), np.zeros((2, 2)))
