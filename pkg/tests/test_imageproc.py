import itertools
import warnings

import numpy as np
import pytest

from frontseg.imageproc import (
    FrontMask,
    SampleImage,
    adaptive_median_filter,
    augment_expand,
    bilinear_resize,
    crop_from_square,
    dilate_to_width,
    disk,
    edt,
    median_kernel_side,
    normalize_intensity,
    preprocess_pair,
    read_image_png,
    read_mask_png,
    resize_mask,
    write_image_png,
    write_mask_png,
    zero_pad_to_square,
)


def brute_edt(mask):
    fg = np.argwhere(mask)
    grid = np.stack(np.indices(mask.shape), axis=-1).reshape(-1, 1, 2)
    return np.sqrt(((grid - fg[None]) ** 2).sum(-1).min(1)).reshape(mask.shape)


@pytest.mark.parametrize("res,side", [(20, 3), (6.7, 7), (10, 5), (50, 3), (1, 51), (5, 11)])
def test_median_kernel_side(res, side):
    assert median_kernel_side(res) == side


def test_median_filter_keeps_constant_image():
    img = SampleImage(np.full((9, 7), 0.3), 10.0, "c")
    np.testing.assert_allclose(adaptive_median_filter(img).pixels, 0.3)


def test_median_filter_removes_isolated_spike():
    px = np.zeros((9, 9))
    px[4, 4] = 1.0
    assert adaptive_median_filter(SampleImage(px, 20.0, "s")).pixels.max() == 0


def test_sample_image_rejects_bad_resolution():
    with pytest.raises(ValueError):
        SampleImage(np.zeros((2, 2)), 0.0, "x")


def test_front_mask_rejects_non_binary():
    with pytest.raises(ValueError, match="non-binary mask"):
        FrontMask(np.array([[0, 2]]), 1.0, "x")


def test_normalize_intensity_range():
    rng = np.random.default_rng(0)
    out = normalize_intensity(rng.gamma(2.0, size=(10, 12)))
    assert out.min() == pytest.approx(0) and out.max() == pytest.approx(1)


def test_pad_100x60_centres_content():
    img = SampleImage(np.ones((100, 60)), 1.0, "p")
    out = zero_pad_to_square(img).pixels
    assert out.shape == (100, 100)
    assert not out[:, :20].any() and not out[:, 80:].any() and out[:, 20:80].all()


def test_pad_odd_surplus_goes_right_and_bottom():
    out = zero_pad_to_square(SampleImage(np.ones((5, 4)), 1.0, "p")).pixels
    assert out.shape == (5, 5) and not out[:, 4].any() and out[:, :4].all()
    out = zero_pad_to_square(SampleImage(np.ones((4, 5)), 1.0, "p")).pixels
    assert not out[4].any() and out[:4].all()


@pytest.mark.parametrize("shape", [(5, 4), (4, 5), (7, 7), (3, 10), (11, 2)])
def test_pad_then_crop_roundtrip(shape):
    px = np.random.default_rng(1).random(shape)
    sq = zero_pad_to_square(SampleImage(px, 1.0, "r")).pixels
    np.testing.assert_array_equal(crop_from_square(sq, shape), px)


def test_bilinear_resize_constant_and_identity():
    img = SampleImage(np.full((6, 6), 0.7), 10.0, "c")
    out = bilinear_resize(img, 15)
    np.testing.assert_allclose(out.pixels, 0.7)
    assert out.resolution == pytest.approx(4.0)
    px = np.array([[0.1, 0.9], [0.4, 0.2]])
    np.testing.assert_allclose(bilinear_resize(SampleImage(px, 1.0, "i"), 2).pixels, px)


def _bilinear_oracle(px, out_side):
    n = px.shape[0]
    out = np.empty((out_side, out_side))
    for i, j in itertools.product(range(out_side), repeat=2):
        y = min(max((i + 0.5) * n / out_side - 0.5, 0), n - 1)
        x = min(max((j + 0.5) * n / out_side - 0.5, 0), n - 1)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        y1, x1 = min(y0 + 1, n - 1), min(x0 + 1, n - 1)
        dy, dx = y - y0, x - x0
        out[i, j] = ((1 - dy) * (1 - dx) * px[y0, x0] + (1 - dy) * dx * px[y0, x1]
                     + dy * (1 - dx) * px[y1, x0] + dy * dx * px[y1, x1])
    return out


@pytest.mark.parametrize("n,m", [(4, 2), (4, 7), (5, 3), (3, 8)])
def test_bilinear_resize_matches_per_pixel_oracle(n, m):
    px = np.indices((n, n)).sum(0) % 2 * 1.0 if n == 4 else np.random.default_rng(n).random((n, n))
    out = bilinear_resize(SampleImage(px, 1.0, "b"), m).pixels
    np.testing.assert_allclose(out, _bilinear_oracle(px, m), atol=1e-12)


def test_resize_mask_keeps_every_front_and_stays_binary():
    m = np.zeros((64, 64), np.uint8)
    m[10, 3:50] = 1
    m[40:60, 30] = 1
    out = resize_mask(m, 16)
    assert set(np.unique(out)) <= {0, 1}
    assert out[2].any() and out[10:15, 7].any()


def test_disk_radius_one_is_plus_shape():
    np.testing.assert_array_equal(disk(1), [[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def test_dilate_single_pixel_target_3():
    m = np.zeros((5, 5), np.uint8)
    m[2, 2] = 1
    out = dilate_to_width(m, 3)
    assert out.sum() == 5
    np.testing.assert_array_equal(out[1:4, 1:4], disk(1))


def test_dilate_horizontal_line_width():
    m = np.zeros((40, 40), np.uint8)
    m[20, 10:30] = 1
    widths = dilate_to_width(m, 6)[:, 12:28].sum(axis=0)
    assert set(widths) <= {5, 6, 7}


def test_dilate_target_1_is_identity_and_empty_passes():
    m = (np.random.default_rng(0).random((8, 8)) > 0.8).astype(np.uint8)
    np.testing.assert_array_equal(dilate_to_width(m, 1), m)
    assert not dilate_to_width(np.zeros((4, 4), np.uint8), 6).any()


def test_dilate_is_extensive_and_monotone():
    m = (np.random.default_rng(3).random((20, 20)) > 0.95).astype(np.uint8)
    prev = m
    for t in range(1, 10):
        cur = dilate_to_width(m, t)
        assert np.all(cur >= prev)
        prev = cur


def test_edt_small_cases():
    np.testing.assert_array_equal(edt(np.ones((4, 3))), 0)
    m = np.zeros((3, 3))
    m[1, 1] = 1
    r2 = np.sqrt(2)
    np.testing.assert_allclose(edt(m), [[r2, 1, r2], [1, 0, 1], [r2, 1, r2]])


def test_edt_matches_brute_force_on_non_square_masks():
    rng = np.random.default_rng(7)
    for shape in [(5, 17), (23, 4), (1, 9), (9, 1)]:
        m = rng.random(shape) > 0.85
        m.flat[rng.integers(m.size)] = True
        np.testing.assert_allclose(edt(m), brute_edt(m), atol=1e-9)


def test_edt_empty_mask_warns_and_returns_inf():
    with pytest.warns(RuntimeWarning):
        d = edt(np.zeros((3, 3)))
    assert np.isinf(d).all()


def test_edt_zero_exactly_on_front_and_lipschitz():
    rng = np.random.default_rng(11)
    m = rng.random((30, 30)) > 0.97
    m[0, 0] = True
    d = edt(m)
    np.testing.assert_array_equal(d == 0, m)
    assert np.abs(np.diff(d, axis=0)).max() <= 1 + 1e-12
    assert np.abs(np.diff(d, axis=1)).max() <= 1 + 1e-12


def test_augment_expand_count_ids_and_alignment():
    rng = np.random.default_rng(0)
    img = SampleImage(rng.random((6, 6)), 5.0, "a")
    mask = FrontMask((rng.random((6, 6)) > 0.7).astype(np.uint8), 5.0, "a")
    out = augment_expand([(img, mask), (img, mask)])
    assert len(out) == 16
    assert [o[0].id for o in out[:8]] == ["a_r0", "a_r0f", "a_r90", "a_r90f", "a_r180", "a_r180f", "a_r270", "a_r270f"]
    for i, m in out:
        # same transform on both: the pixel values under the mask are preserved as a multiset
        np.testing.assert_allclose(np.sort(i.pixels[m.pixels == 1]), np.sort(img.pixels[mask.pixels == 1]))
    assert len({o[0].pixels.tobytes() for o in out[:8]}) == 8


def test_augment_rejects_non_square():
    with pytest.raises(ValueError):
        augment_expand([(np.zeros((3, 4)), np.zeros((3, 4)))])


def test_png_roundtrip(tmp_path):
    px = np.random.default_rng(2).random((9, 13))
    write_image_png(tmp_path / "a.png", px, bits=16)
    np.testing.assert_allclose(read_image_png(tmp_path / "a.png"), px, atol=1 / 65535)
    write_image_png(tmp_path / "b.png", px, bits=8)
    np.testing.assert_allclose(read_image_png(tmp_path / "b.png"), px, atol=1 / 255)
    m = (px > 0.5).astype(np.uint8)
    write_mask_png(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask_png(tmp_path / "m.png"), m)


def test_read_mask_rejects_grey_levels(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[0, 128]], np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(ValueError, match="non-binary mask"):
        read_mask_png(tmp_path / "g.png")


def test_preprocess_pair_shapes_and_width():
    px = np.random.default_rng(0).random((90, 120))
    m = np.zeros((90, 120), np.uint8)
    m[45, :] = 1
    img, mask = preprocess_pair(SampleImage(px, 30.0, "p"), FrontMask(m, 30.0, "p"), size=64, front_width=6)
    assert img.shape == mask.shape == (64, 64)
    assert 0 <= img.pixels.min() and img.pixels.max() <= 1
    assert img.resolution == pytest.approx(30.0 * 120 / 64)
    widths = mask.pixels[:, 10:54].sum(axis=0)
    assert set(widths) <= {5, 6, 7}
