import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualpix.optics import (LensParams, coc_radius_px, dp_signed_difference, full_disc_blur,
                            full_disc_psf, horizontal_moment, kernel_size, make_dp_psf_pair, quantize_radii,
                            synthesize_dp_views)

LENS = LensParams(focal_length_mm=50, f_number=4, focus_distance_mm=1000, pixel_pitch_mm=0.01)


def test_coc_on_focal_plane_is_zero():
    assert coc_radius_px(LENS, 1000.0) == 0.0


def test_coc_hand_value():
    # A = 12.5 mm; diameter = 12.5 * 50 * 1000 / (2000 * 950) mm = 0.32895 mm -> radius 16.447 px at 0.01 mm
    assert coc_radius_px(LENS, 2000.0) == pytest.approx(16.447, abs=1e-3)


def test_coc_front_focus_negative():
    r = coc_radius_px(LENS, 750.0)
    want = 12.5 * 50 * 250 / (2 * 750 * 950 * 0.01)
    assert r < 0
    assert abs(r) == pytest.approx(want, rel=1e-12)


def test_coc_rejects_depth_inside_focal_length():
    with pytest.raises(ValueError):
        coc_radius_px(LENS, 50.0)


def test_coc_scales_inversely_with_f_number():
    wide = LensParams(50, 4, 1000, 0.03)
    narrow = LensParams(50, 22, 1000, 0.03)
    assert abs(coc_radius_px(narrow, 3000)) < abs(coc_radius_px(wide, 3000))
    assert coc_radius_px(wide, 3000) / coc_radius_px(narrow, 3000) == pytest.approx(22 / 4)


def test_lens_validation():
    with pytest.raises(ValueError):
        LensParams(focal_length_mm=50, focus_distance_mm=40)
    with pytest.raises(ValueError):
        LensParams(f_number=0)


def test_full_disc_delta_and_size():
    np.testing.assert_array_equal(full_disc_psf(0.0), [[1.0]])
    np.testing.assert_array_equal(full_disc_psf(0.3), [[1.0]])
    assert full_disc_psf(3).shape == (7, 7)
    assert kernel_size(2.2) == 7


def test_full_disc_radius3_symmetry():
    k = full_disc_psf(3.0)
    assert abs(k.sum() - 1) < 1e-6
    for turns in (1, 2, 3):
        np.testing.assert_allclose(np.rot90(k, turns), k, atol=1e-6)


def test_full_disc_matches_fine_coverage_oracle():
    coarse = full_disc_psf(1.0)
    n = 64
    c = (np.arange(3 * n) + 0.5) / n - 1.5
    inside = (c[:, None] ** 2 + c[None, :] ** 2) <= 1.0
    fine = inside.reshape(3, n, 3, n).mean(axis=(1, 3))
    fine = fine / fine.sum()
    assert np.max(np.abs(coarse - fine)) < 5e-3


def test_pair_radius_zero():
    pair = make_dp_psf_pair(0.0, 0.3)
    np.testing.assert_array_equal(pair.left, [[0.5]])
    np.testing.assert_array_equal(pair.right, [[0.5]])


def test_pair_hard_split_column_mass():
    pair = make_dp_psf_pair(3.0, 0.0)
    cols = pair.left.sum(axis=0)
    assert np.all(cols[4:] == 0)
    assert cols[:4].sum() == pytest.approx(0.5, abs=1e-12)
    # the centre column is shared evenly between the views
    assert pair.left[:, 3].sum() == pytest.approx(pair.right[:, 3].sum(), abs=1e-12)
    np.testing.assert_array_equal(pair.right, pair.left[:, ::-1])


def test_pair_rejects_bad_leakage():
    for bad in (-0.1, 0.5, 1.0):
        with pytest.raises(ValueError):
            make_dp_psf_pair(2.0, bad)


@settings(max_examples=50, deadline=None)
@given(radius=st.floats(-12, 12, allow_nan=False), leakage=st.floats(0, 0.49))
def test_pair_invariants(radius, leakage):
    pair = make_dp_psf_pair(radius, leakage)
    assert pair.left.shape == pair.right.shape == (kernel_size(radius),) * 2
    assert np.all(pair.left >= 0) and np.all(pair.right >= 0)
    assert abs(pair.left.sum() - 0.5) < 1e-6
    assert abs(pair.right.sum() - 0.5) < 1e-6
    assert np.array_equal(pair.right, pair.left[:, ::-1])
    flipped = make_dp_psf_pair(-radius, leakage)
    assert np.array_equal(flipped.left, pair.right)
    assert np.array_equal(flipped.right, pair.left)


def test_leakage_moves_mass_across_centre():
    hard = make_dp_psf_pair(4.0, 0.0).left
    soft = make_dp_psf_pair(4.0, 0.3).left
    assert soft[:, 5:].sum() > hard[:, 5:].sum() == 0


def test_quantize_reproduces_few_levels():
    m = np.array([[0.0, 2.0], [5.0, -1.0]])
    idx, radii = quantize_radii(m, 16)
    np.testing.assert_array_equal(radii[idx], m)


def test_views_constant_image():
    img = np.full((20, 24, 3), 0.6)
    defocus = np.random.default_rng(0).uniform(-4, 4, (20, 24))
    left, right, comb = synthesize_dp_views(img, defocus)
    np.testing.assert_allclose(left, 0.3, atol=1e-12)
    np.testing.assert_allclose(right, 0.3, atol=1e-12)
    np.testing.assert_allclose(comb, 0.6, atol=1e-12)


def test_views_in_focus():
    img = np.random.default_rng(1).random((16, 16, 3))
    left, right, comb = synthesize_dp_views(img, np.zeros((16, 16)))
    np.testing.assert_array_equal(left, 0.5 * img)
    np.testing.assert_array_equal(right, 0.5 * img)
    np.testing.assert_array_equal(comb, left + right)


def point_image(size=21, at=(10, 10)):
    img = np.zeros((size, size))
    img[at] = 1.0
    return img


def test_point_source_stamp_oracle():
    img = point_image()
    left, right, _ = synthesize_dp_views(img, np.full(img.shape, 3.0), leakage=0.0)
    h = make_dp_psf_pair(3.0, 0.0)
    want_l = np.zeros_like(img)
    want_r = np.zeros_like(img)
    # stamp: each output pixel (y, x) within the kernel footprint receives H[y - 10 + 3, x - 10 + 3]
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            i, j = y - 10 + 3, x - 10 + 3
            if 0 <= i < 7 and 0 <= j < 7:
                want_l[y, x] = h.left[i, j]
                want_r[y, x] = h.right[i, j]
    np.testing.assert_allclose(left, want_l, atol=1e-12)
    np.testing.assert_allclose(right, want_r, atol=1e-12)


def test_formation_matches_full_disc_blur():
    rng = np.random.default_rng(3)
    img = rng.random((32, 40, 3))
    defocus = rng.uniform(-6, 6, (32, 40))
    left, right, comb = synthesize_dp_views(img, defocus, leakage=0.2)
    assert np.array_equal(comb, left + right)
    assert np.max(np.abs(comb - full_disc_blur(img, defocus))) < 1e-5


def test_sign_flip_swaps_views():
    rng = np.random.default_rng(4)
    img = rng.random((24, 24, 3))
    defocus = rng.uniform(-5, 5, (24, 24))
    l1, r1, _ = synthesize_dp_views(img, defocus)
    l2, r2, _ = synthesize_dp_views(img, -defocus)
    # bins are mirrored exactly, so the views swap exactly
    np.testing.assert_array_equal(l1, r2)
    np.testing.assert_array_equal(r1, l2)


def test_size_mismatch_rejected():
    with pytest.raises(ValueError):
        synthesize_dp_views(np.zeros((8, 8)), np.zeros((8, 9)))


def test_point_source_centroid_flips():
    img = point_image(31, (15, 15))
    back = dp_signed_difference(*synthesize_dp_views(img, np.full(img.shape, 5.0))[:2])
    front = dp_signed_difference(*synthesize_dp_views(img, np.full(img.shape, -5.0))[:2])
    assert horizontal_moment(back, 15) < 0 < horizontal_moment(front, 15)


def test_difference_in_focus_and_antisymmetric():
    img = np.random.default_rng(5).random((16, 16))
    l, r, _ = synthesize_dp_views(img, np.zeros((16, 16)))
    np.testing.assert_array_equal(dp_signed_difference(l, r), 0)
    l, r, _ = synthesize_dp_views(img, np.full((16, 16), 2.5))
    np.testing.assert_array_equal(dp_signed_difference(r, l), -dp_signed_difference(l, r))


def test_support_grows_with_radius():
    img = point_image(41, (20, 20))
    widths = []
    for radius in (1, 2, 3, 5, 8):
        left, _, _ = synthesize_dp_views(img, np.full(img.shape, float(radius)), leakage=0.0)
        cols = np.nonzero(left.sum(axis=0) > 1e-12)[0]
        widths.append(cols.max() - cols.min() + 1)
    assert widths == sorted(widths) and widths[0] < widths[-1]
    assert math.isclose(widths[-1], 9)
