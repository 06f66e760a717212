import math

import numpy as np
import pytest

from dualpix.metrics import PSNR_CAP, mae, psnr, report, ssim


def img(seed, shape=(24, 20, 3)):
    return np.random.default_rng(seed).random(shape)


def test_psnr_cases():
    a = img(0)
    assert psnr(a, a) == PSNR_CAP == 99.0
    b = np.full((10, 10), 0.5)
    assert psnr(b, b + 0.1) == pytest.approx(20.0, abs=1e-9)
    x, y = img(1), img(2)
    err = sum((u - v) ** 2 for u, v in zip(x.ravel(), y.ravel())) / x.size
    assert abs(psnr(x, y) - (-10 * math.log10(err))) < 1e-6
    with pytest.raises(ValueError):
        psnr(x, y[:5])


def test_mae_cases():
    a = img(3)
    assert mae(a, a) == 0
    assert mae(np.full((4, 4), 0.5), np.full((4, 4), 0.75)) == pytest.approx(0.25)
    b = img(4)
    oracle = sum(abs(u - v) for u, v in zip(a.ravel(), b.ravel())) / a.size
    assert abs(mae(a, b) - oracle) < 1e-7


def test_ssim_identity_is_exactly_one():
    for seed in range(3):
        a = img(seed)
        assert ssim(a, a) == 1.0


def test_ssim_constant_offset_closed_form():
    mu_a, mu_b = 0.4, 0.5
    a = np.full((16, 16, 3), mu_a)
    c1 = 0.01 ** 2
    want = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    assert abs(ssim(a, a + 0.1) - want) < 1e-6


def test_ssim_negative_contrast_lower():
    a = img(5)
    assert ssim(a, 1 - a) < ssim(a, a)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_symmetry():
    a, b = img(6), img(7)
    assert psnr(a, b) == psnr(b, a)
    assert mae(a, b) == mae(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_psnr_noise_ladder():
    base = np.clip(img(8) * 0.5 + 0.25, 0, 1)
    noise = np.random.default_rng(9).standard_normal(base.shape)
    values = [psnr(base, base + s * noise) for s in (0.001, 0.01, 0.03, 0.1, 0.3)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_report_average():
    a, b = img(10), img(11)
    r = report([(a, a), (a, b)])
    assert r.n == 2
    assert r.psnr == pytest.approx((99.0 + psnr(a, b)) / 2)
    assert r.row("deblur").split(",")[0] == "deblur"
    with pytest.raises(ValueError):
        report([])
