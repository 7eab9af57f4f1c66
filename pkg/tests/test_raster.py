import numpy as np
import png
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tinymil.raster import (
    AugmentSpec,
    _affine_about_center,
    augment,
    crop_centered,
    load_image,
    resize_bilinear,
    save_image,
)


def test_resize_identity_is_bitwise():
    r = np.random.default_rng(0).random((4, 4)).astype(np.float32)
    out = resize_bilinear(r, 4, 4)
    assert out.dtype == np.float32
    assert np.array_equal(out, r)


def test_resize_constant_preserved():
    out = resize_bilinear(np.full((2, 2), 0.7, np.float32), 7, 5)
    assert out.shape == (7, 5)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-7)


def test_resize_align_corners_1x2_to_1x3():
    # align corners: x_src = i * (2 - 1) / (3 - 1) = 0, 0.5, 1
    out = resize_bilinear(np.array([[0.0, 1.0]]), 1, 3)
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])


def test_resize_image_tensor_keeps_channels():
    img = np.random.default_rng(1).random((5, 6, 3)).astype(np.float32)
    out = resize_bilinear(img, 9, 4)
    assert out.shape == (9, 4, 3)
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], resize_bilinear(img[:, :, c], 9, 4), atol=1e-7)


def test_resize_corners_map_exactly():
    img = np.random.default_rng(2).random((6, 9)).astype(np.float32)
    out = resize_bilinear(img, 13, 4)
    for (r, c), (R, C) in [((0, 0), (0, 0)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0)), ((-1, -1), (-1, -1))]:
        assert out[R, C] == pytest.approx(img[r, c], abs=1e-7)


def test_resize_rejects_zero_dims():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2)), 0, 3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-5, 5, width=32)),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_is_convex_combination(grid, h, w):
    out = resize_bilinear(grid, h, w)
    assert out.shape == (h, w)
    assert out.min() >= grid.min() - 1e-5
    assert out.max() <= grid.max() + 1e-5


def test_crop_centered_index_arithmetic():
    img = np.arange(64, dtype=np.float32).reshape(8, 8, 1) / 63
    patch = crop_centered(img, 4, 4, 2)
    assert patch.shape == (4, 4, 1)
    np.testing.assert_array_equal(patch, img[2:6, 2:6])
    for r in range(4):
        for c in range(4):
            assert patch[r, c, 0] == img[4 - 2 + r, 4 - 2 + c, 0]


def test_crop_centered_full_frame():
    img = np.random.default_rng(3).random((4, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(crop_centered(img, 2, 2, 2), img)


def test_crop_centered_out_of_bounds():
    with pytest.raises(IndexError):
        crop_centered(np.zeros((8, 8, 1), np.float32), 1, 4, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.data())
def test_crop_dimensions_always_exact(half, data):
    h = data.draw(st.integers(2 * half, 40))
    w = data.draw(st.integers(2 * half, 40))
    a = data.draw(st.integers(half, h - half))
    b = data.draw(st.integers(half, w - half))
    patch = crop_centered(np.zeros((h, w, 3), np.float32), a, b, half)
    assert patch.shape == (2 * half, 2 * half, 3)


def test_augment_identity_spec_is_bitwise():
    img = np.random.default_rng(4).random((9, 7, 3)).astype(np.float32)
    out = augment(img, AugmentSpec())
    assert np.array_equal(out, img)


def test_flip_twice_is_identity():
    img = np.random.default_rng(5).random((6, 5, 1)).astype(np.float32)
    once = augment(img, AugmentSpec(flip_h=True))
    assert not np.array_equal(once, img)
    assert np.array_equal(augment(once, AugmentSpec(flip_h=True)), img)
    v = augment(img, AugmentSpec(flip_v=True))
    assert np.array_equal(augment(v, AugmentSpec(flip_v=True)), img)


def test_translate_moves_bright_pixel():
    img = np.zeros((4, 4, 1), np.float32)
    img[1, 1] = 1.0
    out = augment(img, AugmentSpec(translate_px=(2, 0)), fill=0.0)
    expected = np.zeros_like(img)
    expected[3, 1] = 1.0
    assert np.array_equal(out, expected)


def test_translate_fills_vacated_region():
    img = np.ones((5, 5, 1), np.float32)
    out = augment(img, AugmentSpec(translate_px=(0, -2)), fill=0.25)
    assert np.all(out[:, 3:] == 0.25)
    assert np.all(out[:, :3] == 1.0)


@pytest.mark.parametrize("deg", [90, 180, 270])
def test_right_angle_rotation_preserves_pixel_multiset(deg):
    img = np.random.default_rng(deg).random((8, 8, 1)).astype(np.float32)
    out = augment(img, AugmentSpec(rotation_deg=deg))
    assert np.array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


def test_rotation_180_on_rectangle_is_exact():
    img = np.random.default_rng(6).random((4, 7, 1)).astype(np.float32)
    out = augment(img, AugmentSpec(rotation_deg=180))
    assert np.array_equal(out, img[::-1, ::-1])


def test_resampled_rotation_agrees_with_permutation_path():
    img = np.random.default_rng(7).random((9, 9, 1)).astype(np.float32)
    exact = augment(img, AugmentSpec(rotation_deg=90))
    sampled = _affine_about_center(img, 1.0, 90.0, fill=0.0)
    np.testing.assert_allclose(sampled, exact, atol=1e-5)


def test_zoom_and_oblique_rotation_keep_shape_and_range():
    img = np.random.default_rng(8).random((12, 10, 3)).astype(np.float32)
    out = augment(img, AugmentSpec(zoom=0.6, rotation_deg=45, translate_px=(-3, 4)), fill=0.0)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    # zooming out leaves the frame corners uncovered
    assert out[0, 0, 0] == 0.0


def test_zoom_in_constant_image_stays_constant():
    img = np.full((10, 10, 1), 0.3, np.float32)
    np.testing.assert_allclose(augment(img, AugmentSpec(zoom=1.4)), 0.3, atol=1e-6)


@pytest.mark.parametrize("kwargs", [
    {"zoom": 0.5}, {"zoom": 1.5}, {"rotation_deg": 10}, {"rotation_deg": 360},
    {"translate_px": (5, 0)}, {"translate_px": (0, -5)},
])
def test_augment_spec_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentSpec(**kwargs)


def test_random_augment_spec_is_valid_and_seeded():
    a = [AugmentSpec.random(np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]
    rng = np.random.default_rng(10)
    for _ in range(200):
        spec = AugmentSpec.random(rng)
        assert spec.rotation_deg % 15 == 0


# --- PNG I/O ---------------------------------------------------------------


def test_png_round_trip_rgb(tmp_path):
    img = np.random.default_rng(11).random((3, 3, 3)).astype(np.float32)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (3, 3, 3)
    assert np.max(np.abs(back - img)) <= 1 / 65535


def test_png_round_trip_gray(tmp_path):
    img = np.random.default_rng(12).random((5, 4, 1)).astype(np.float32)
    save_image(img, tmp_path / "g.png")
    assert np.max(np.abs(load_image(tmp_path / "g.png") - img)) <= 1 / 65535


def test_load_16bit_gray_quantization(tmp_path):
    path = tmp_path / "half.png"
    with open(path, "wb") as fh:
        png.Writer(width=2, height=2, greyscale=True, bitdepth=16).write(fh, [[32768, 32768]] * 2)
    img = load_image(path)
    # 32768 / 65535
    np.testing.assert_allclose(img, 0.5, atol=1 / 65535)


def test_load_8bit_rgb(tmp_path):
    path = tmp_path / "rgb8.png"
    with open(path, "wb") as fh:
        png.Writer(width=1, height=1, greyscale=False, bitdepth=8).write(fh, [[255, 0, 51]])
    np.testing.assert_allclose(load_image(path)[0, 0], [1.0, 0.0, 0.2], atol=1e-6)


def test_load_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.png"
    with pytest.raises(OSError, match="nope.png"):
        load_image(missing)


def test_load_corrupt_file(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(OSError, match="bad.png"):
        load_image(bad)
