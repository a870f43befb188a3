import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccvit import imaging
from ccvit.imaging import Image, ImagingError, NoiseSpec, PatchGrid


def gray(value, c=3, h=8, w=8):
    return Image(np.full((c, h, w), value, dtype=np.float32))


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def test_resize_noop_is_bitwise_identity():
    rng = np.random.default_rng(0)
    img = Image(rng.random((3, 16, 16)).astype(np.float32))
    out = imaging.bilinear_resize(img.data, 16, 16)
    assert np.array_equal(out, img.data)


def test_resize_constant_stays_constant():
    img = gray(0.37, h=32, w=32)
    out = imaging.bilinear_resize(img.data, 16, 16)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_resize_2x_downscale_averages_blocks():
    # checkerboard: every 2x2 block holds two 0s and two 1s
    board = np.indices((4, 4)).sum(axis=0) % 2
    img = np.broadcast_to(board, (3, 4, 4)).astype(np.float32).copy()
    out = imaging.bilinear_resize(img, 2, 2)
    np.testing.assert_allclose(out, 0.5, atol=1e-7)

    rng = np.random.default_rng(1)
    data = rng.random((3, 6, 6)).astype(np.float32)
    out = imaging.bilinear_resize(data, 3, 3)
    expected = data.reshape(3, 3, 2, 3, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(out, expected, atol=1e-6)


# ---------------------------------------------------------------------------
# patchify / unpatchify
# ---------------------------------------------------------------------------


def test_patchify_small_and_large_shapes():
    g = imaging.patchify(gray(0.5, h=224, w=224), 16)
    assert (g.n_patches, g.dim) == (196, 768)
    g = imaging.patchify(gray(0.5, h=32, w=32), 16)
    assert g.n_patches == 4


def test_patchify_rejects_indivisible():
    with pytest.raises(ImagingError):
        imaging.patchify(gray(0.0, h=30, w=32), 16)


def test_patch_flatten_order_channel_major_then_row_major():
    data = np.zeros((2, 2, 2), dtype=np.float32)
    for c in range(2):
        for h in range(2):
            for w in range(2):
                data[c, h, w] = (c * 100 + h * 10 + w) / 1000.0
    g = imaging.patchify(Image(data), 2)
    expected = np.array([0, 1, 10, 11, 100, 101, 110, 111]) / 1000.0
    np.testing.assert_array_equal(g.vectors[0], expected.astype(np.float32))


def test_patch_grid_order_is_row_major():
    data = np.zeros((1, 4, 4), dtype=np.float32)
    for i in range(4):
        r, c = divmod(i, 2)
        data[0, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = i / 10.0
    g = imaging.patchify(Image(data), 2)
    for i in range(4):
        np.testing.assert_array_equal(g.vectors[i], np.float32(i / 10.0))


def test_unpatchify_constant_and_single_patch():
    g = imaging.patchify(gray(0.25, h=8, w=8), 4)
    np.testing.assert_array_equal(imaging.unpatchify(g).data, np.float32(0.25))
    rng = np.random.default_rng(2)
    v = rng.random((1, 3 * 4 * 4)).astype(np.float32)
    img = imaging.unpatchify(PatchGrid(v, 1, 1, 4, 3))
    np.testing.assert_array_equal(imaging.patchify(img, 4).vectors, v)


@settings(max_examples=40, deadline=None)
@given(
    gh=st.integers(1, 4),
    gw=st.integers(1, 4),
    p=st.integers(1, 5),
    seed=st.integers(0, 2**31),
)
def test_patchify_round_trip_bitwise(gh, gw, p, seed):
    rng = np.random.default_rng(seed)
    data = rng.random((3, gh * p, gw * p)).astype(np.float32)
    img = Image(data)
    back = imaging.unpatchify(imaging.patchify(img, p))
    assert np.array_equal(back.data, data)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def test_noise_spec_validation():
    with pytest.raises(ImagingError):
        NoiseSpec("mask", 0.0)
    with pytest.raises(ImagingError):
        NoiseSpec("mask", 1.0)
    with pytest.raises(ImagingError):
        NoiseSpec("gaussian_noise", -1.0)
    with pytest.raises(ImagingError):
        NoiseSpec("speckle", 0.5)


def test_mask_touches_exact_patch_count():
    rng = np.random.default_rng(3)
    img = Image(rng.random((3, 224, 224)).astype(np.float32))
    out = imaging.apply_noise(img, NoiseSpec("mask", 0.5, seed=7), patch_size=16)
    before = imaging.patchify(img, 16).vectors
    after = imaging.patchify(out, 16).vectors
    changed = np.any(before != after, axis=1)
    assert changed.sum() == 98
    masked = np.all(after == np.float32(0.5), axis=1)
    assert masked[changed].all()
    assert np.array_equal(before[~changed], after[~changed])


def test_mask_count_is_floor_of_ratio():
    img = gray(0.9, h=112, w=112)  # n = 49 patches at P=16
    out = imaging.apply_noise(img, NoiseSpec("mask", 0.1, seed=0), patch_size=16)
    after = imaging.patchify(out, 16).vectors
    assert np.all(after == np.float32(0.5), axis=1).sum() == math.floor(0.1 * 49)


def test_apply_noise_deterministic_per_seed():
    rng = np.random.default_rng(4)
    img = Image(rng.random((3, 64, 64)).astype(np.float32))
    for spec in (NoiseSpec("mask", 0.3, seed=5), NoiseSpec("gaussian_noise", 10, seed=5)):
        a = imaging.apply_noise(img, spec, patch_size=8)
        b = imaging.apply_noise(img, spec, patch_size=8)
        assert np.array_equal(a.data, b.data)
    c = imaging.apply_noise(img, NoiseSpec("gaussian_noise", 10, seed=6), patch_size=8)
    assert not np.array_equal(a.data, c.data)


def test_gaussian_noise_half_normal_mean():
    # E|N(0, s)| = s * sqrt(2/pi); clamping is negligible at mid-gray
    img = gray(0.5, h=578, w=578)
    out = imaging.apply_noise(img, NoiseSpec("gaussian_noise", 25.0, seed=8))
    mean_abs = np.abs(out.data.astype(np.float64) - 0.5).mean()
    expected = 25.0 / 255.0 * math.sqrt(2.0 / math.pi)
    assert abs(mean_abs - expected) / expected < 0.02


def test_blur_of_constant_is_identity():
    img = gray(0.6, h=32, w=32)
    out = imaging.apply_noise(img, NoiseSpec("gaussian_blur", 2.0))
    np.testing.assert_allclose(out.data, 0.6, atol=1e-6)


def test_blur_kernel_shape_and_smoothing():
    k = imaging.gaussian_kernel_1d(1.0)
    assert len(k) == 7  # radius ceil(3 * sigma) = 3
    np.testing.assert_allclose(k.sum(), 1.0, rtol=1e-12)
    assert np.array_equal(k, k[::-1])

    rng = np.random.default_rng(9)
    img = Image(rng.random((3, 32, 32)).astype(np.float32))
    out = imaging.apply_noise(img, NoiseSpec("gaussian_blur", 2.0))
    assert out.data.std() < img.data.std()


# ---------------------------------------------------------------------------
# file I/O and enumeration
# ---------------------------------------------------------------------------


def test_png_round_trip_is_lossless_for_uint8_pixels(tmp_path):
    rng = np.random.default_rng(10)
    raw = rng.integers(0, 256, size=(3, 24, 24), dtype=np.uint8)
    img = imaging.image_from_array(raw)
    path = tmp_path / "x.png"
    imaging.save_image(img, path)
    back = imaging.load_image(path)
    assert np.array_equal(back.data, img.data)


def test_load_resize_applies_target(tmp_path):
    img = gray(0.5, h=16, w=16)
    path = tmp_path / "g.png"
    imaging.save_image(img, path)
    out = imaging.load_image(path, target_resolution=8)
    assert out.data.shape == (3, 8, 8)
    np.testing.assert_allclose(out.data, out.data[0, 0, 0], atol=1e-6)


def test_load_rejects_unknown_suffix_and_garbage(tmp_path):
    bad = tmp_path / "x.tiff"
    bad.write_bytes(b"whatever")
    with pytest.raises(ImagingError):
        imaging.load_image(bad)
    garbage = tmp_path / "x.png"
    garbage.write_bytes(b"not a png at all")
    with pytest.raises(ImagingError):
        imaging.load_image(garbage)


def test_enumerate_images_recursive_lexicographic(tmp_path):
    (tmp_path / "b").mkdir()
    (tmp_path / "a").mkdir()
    names = ["b/2.png", "a/10.png", "a/1.png", "z.ppm", "skip.txt"]
    img = gray(0.1, h=4, w=4)
    for name in names:
        p = tmp_path / name
        if p.suffix in (".png", ".ppm"):
            imaging.save_image(img, p)
        else:
            p.write_text("ignore me")
    listed = imaging.enumerate_images(tmp_path)
    rel = [p.relative_to(tmp_path).as_posix() for p in listed]
    assert rel == ["a/1.png", "a/10.png", "b/2.png", "z.ppm"]
