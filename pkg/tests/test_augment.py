import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from photodepth import synth
from photodepth.augment import (
    AspectRatioTable,
    AugConfig,
    ar_aug,
    color_jitter,
    crop_for,
    flip_and_jitter,
    flip_camera,
    flip_horizontal,
    output_size,
    sample_ar_crop,
    sample_support_offsets,
)
from photodepth.core import InputError, Rng
from photodepth.geometry import Camera, Pose, backproject, pixel_grid, project, warp_support


def test_default_table_has_16_ratios():
    t = AspectRatioTable()
    assert len(t) == 16
    # portrait entries are taller than wide, landscape wider than tall
    assert t.ratios[0] == (13, 6) and t.width_over_height(0) < 1
    assert t.ratios[5] == (1, 1)
    assert (9, 16) in t.ratios and t.width_over_height(t.ratios.index((9, 16))) > 1
    with pytest.raises(InputError):
        AspectRatioTable(((0, 1),))


def test_identity_ratio_full_crop():
    t = AspectRatioTable()
    i = t.ratios.index((3, 5))
    assert crop_for(384, 640, t.width_over_height(i), 1.0) == (0, 0, 640, 384)
    assert output_size(384 * 640, 5 / 3) == (384, 640)


def test_square_ratio_on_384x640():
    # crop 384x384; a 480x480 output would be 93.75% of the area, outside the
    # +-5% band, so the nearest in-band multiple-of-32 size wins
    assert crop_for(384, 640, 1.0, 1.0) == (128, 0, 384, 384)
    h, w = output_size(384 * 640, 1.0)
    assert (h, w) == (480, 512)
    assert abs(h * w / (384 * 640) - 1) <= 0.05


@settings(max_examples=200, deadline=None)
@given(st.integers(64, 1000), st.integers(64, 1000), st.integers(0, 15), st.floats(0.5, 1.0))
def test_crop_and_size_invariants(h, w, idx, f):
    t = AspectRatioTable()
    r = t.width_over_height(idx)
    x0, y0, cw, ch = crop_for(h, w, r, f)
    assert 0 <= x0 and 0 <= y0 and x0 + cw <= w and y0 + ch <= h
    # centred: opposite margins differ by at most one pixel
    assert abs(x0 - (w - x0 - cw)) <= 1 and abs(y0 - (h - y0 - ch)) <= 1
    oh, ow = output_size(h * w, r)
    assert oh % 32 == 0 and ow % 32 == 0 and oh >= 64 and ow >= 64


def test_ar_crop_distribution():
    gen = np.random.default_rng(0)
    t = AspectRatioTable()
    idx, fr = [], []
    for _ in range(10_000):
        c = sample_ar_crop(gen, (384, 640), t)
        idx.append(c.ratio_index)
        fr.append(c.fraction)
        oh, ow = c.out_size
        assert abs(oh * ow / (384 * 640) - 1) <= 0.05
        assert oh % 32 == 0 and ow % 32 == 0
    counts = np.bincount(idx, minlength=16)
    assert chisquare(counts).pvalue > 0.01
    assert 0.5 <= min(fr) < 0.51 and 0.99 < max(fr) <= 1.0


def test_sample_rejects_small_images():
    with pytest.raises(InputError):
        sample_ar_crop(0, (32, 640))


def test_ar_aug_prob_zero_is_identity(gen):
    img = gen.random((64, 96, 3))
    cam = Camera(70, 70, 48, 32, 96, 64)
    for s in range(20):
        out, c, d, ar = ar_aug(img, cam, None, s, AugConfig(ar_prob=0.0))
        assert out is img or np.array_equal(out, img)
        assert c == cam and ar is None


def test_ar_aug_seeded_and_camera_consistent(gen):
    img = gen.random((128, 192, 3))
    depth = gen.uniform(1, 3, (128, 192))
    cam = Camera(140, 140, 96.3, 64.1, 192, 128)
    cfg = AugConfig(ar_prob=1.0)
    a = ar_aug(img, cam, depth, Rng(4), cfg)
    b = ar_aug(img, cam, depth, Rng(4), cfg)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1] and np.array_equal(a[2], b[2])
    out, c, d, ar = a
    assert out.shape[:2] == ar.out_size == d.shape and (c.height, c.width) == ar.out_size
    uv = project(backproject(d, c), c)
    u, v = pixel_grid(*d.shape)
    np.testing.assert_allclose(uv[..., 0], u, atol=1e-10)
    np.testing.assert_allclose(uv[..., 1], v, atol=1e-10)


def test_ar_aug_keeps_warp_geometry():
    scene = synth.make_scene(Rng(1), synth.two_plane_spec(128, 192))
    target, supports = synth.scene_frames(scene)
    crop = (32, 16, 120, 96)
    from photodepth.augment import resize_crop, resize_crop_nearest
    from photodepth.geometry import adjust_camera_for_crop_resize

    size = (64, 80)
    cam = adjust_camera_for_crop_resize(scene.camera, crop, size)
    t_img = resize_crop(target.image, crop, size)
    errs = []
    for k, fr in supports.items():
        s_img = resize_crop(fr.image, crop, size)
        # ground-truth depth resampled bilinearly here (the planes are smooth)
        d = resize_crop(target.gt_depth, crop, size)
        res = warp_support(t_img.shape, s_img, d, cam, scene.frames[k])
        inner = np.zeros(d.shape, bool)
        inner[4:-4, 4:-4] = True
        m = res.valid & inner
        errs.append(np.abs(res.synthesized - t_img)[m].mean())
    assert max(errs) < 3 / 255


def test_support_offsets():
    assert all(sample_support_offsets(s, "automotive") == (-1, 1) for s in range(10))
    gen = np.random.default_rng(0)
    draws = np.array([sample_support_offsets(gen) for _ in range(10_000)])
    assert np.all(draws[:, 0] < 0) and np.all(draws[:, 1] > 0)
    assert set(np.abs(draws).ravel()) == {1, 2, 3, 4}
    assert sample_support_offsets(Rng(3)) == sample_support_offsets(Rng(3))
    with pytest.raises(InputError):
        sample_support_offsets(0, "drone")


def test_double_flip_identity(gen):
    img = gen.random((5, 7, 3))
    assert np.array_equal(flip_horizontal(flip_horizontal(img)), img)
    cam = Camera(10, 10, 2.5, 2.0, 7, 5)
    assert flip_camera(flip_camera(cam)) == cam


def test_flip_pixel_mapping(gen):
    img = gen.random((5, 7, 3))
    f = flip_horizontal(img)
    for u in range(7):
        assert np.array_equal(f[2, u], img[2, 6 - u])


def test_flip_keeps_projection_consistent(gen):
    depth = gen.uniform(1, 2, (6, 8))
    cam = Camera(9, 9, 3.2, 2.7, 8, 6)
    pts = backproject(depth, cam)
    # mirrored points (x -> -x) project to mirrored pixels under the flipped camera
    mirrored = pts[:, ::-1] * np.array([-1, 1, 1])
    uv = project(mirrored, flip_camera(cam))
    u, _ = pixel_grid(6, 8)
    np.testing.assert_allclose(uv[..., 0], u, atol=1e-12)


def test_zero_jitter_is_identity(gen):
    img = gen.random((4, 5, 3))
    assert np.array_equal(color_jitter(img, 0, 0, 0), img)


def test_jitter_hand_values():
    img = np.full((2, 2, 3), 0.5)
    assert np.allclose(color_jitter(img, 0.2, 0, 0), 0.6)
    # grey image: contrast about its own mean and saturation do nothing
    assert np.allclose(color_jitter(img, 0, 0.2, 0.2), 0.5)
    assert color_jitter(np.full((2, 2, 3), 0.9), 0.2, 0, 0).max() == 1.0


def test_flip_and_jitter_joint(gen):
    frames = [gen.random((6, 8, 3)) for _ in range(3)]
    depth = gen.random((6, 8))
    cam = Camera(9, 9, 3.2, 2.7, 8, 6)
    cfg = AugConfig(flip_prob=1.0, jitter_prob=1.0)
    out, d, c, info = flip_and_jitter(frames, Rng(0), cfg, depth=depth, camera=cam)
    assert info.flipped and info.jitter is not None
    assert np.array_equal(d, depth[:, ::-1]) and c == flip_camera(cam)
    for o, f in zip(out, frames):
        np.testing.assert_array_equal(o, color_jitter(f[:, ::-1], *info.jitter))
        assert o.min() >= 0 and o.max() <= 1
    out, d, c, info = flip_and_jitter(frames, Rng(0), AugConfig(flip_prob=0.0, jitter_prob=0.0), depth=depth, camera=cam)
    assert not info.flipped and info.jitter is None and c == cam


def test_flip_and_jitter_rates():
    n = 4000
    flips = jits = 0
    img = [np.full((4, 4, 3), 0.5)]
    for s in range(n):
        _, _, _, info = flip_and_jitter(img, Rng(9, (s,)))
        flips += info.flipped
        jits += info.jitter is not None
    assert abs(flips / n - 0.5) < 0.03 and abs(jits / n - 0.5) < 0.03


def test_aug_config_validation():
    with pytest.raises(InputError):
        AugConfig(ar_prob=1.5)
    with pytest.raises(InputError):
        AugConfig(fraction_range=(0.0, 1.0))
    with pytest.raises(InputError):
        AugConfig(profile="drone")
    cfg = AugConfig()
    assert (cfg.ar_prob, cfg.flip_prob, cfg.jitter_prob) == (0.7, 0.5, 0.5)
    assert cfg.fraction_range == (0.5, 1.0)
