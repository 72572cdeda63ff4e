import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage import data as skdata

from facediff.degrade import (
    DegradationParams, bicubic_matrix, degrade_pipeline, gaussian_blur, gaussian_kernel1d, jpeg_approx,
    quality_scale, quant_tables, read_manifest, resize_bicubic, sample_degradation, scaled_table,
    write_manifest,
)
from facediff.metrics import psnr


@pytest.fixture(scope="module")
def natural():
    img = skdata.astronaut()[::4, ::4].astype(np.float64) / 255.0
    return img[:128, :128]


def test_sampling_ranges_over_many_draws():
    draws = [sample_degradation(s) for s in range(10_000)]
    sig = np.array([d.sigma_blur for d in draws])
    r = np.array([d.r_down for d in draws])
    dl = np.array([d.delta_noise for d in draws])
    q = np.array([d.q_jpeg for d in draws])
    assert 0.1 <= sig.min() and sig.max() <= 10
    assert 4 <= r.min() and r.max() <= 20
    assert 1 <= dl.min() and dl.max() <= 20
    assert 30 <= q.min() and q.max() <= 70
    # Both quality endpoints are reachable and the continuous ranges are well covered.
    assert q.min() == 30 and q.max() == 70
    assert sig.max() - sig.min() > 9.8 and r.max() - r.min() > 15.8


def test_sampling_deterministic_and_distinct():
    assert sample_degradation(5) == sample_degradation(5)
    assert all(sample_degradation(2 * k) != sample_degradation(2 * k + 1) for k in range(100))


def test_kernel_shape():
    for sigma in (0.1, 0.5, 1.0, 2.3, 10.0):
        k = gaussian_kernel1d(sigma)
        assert k.size == 2 * math.ceil(3 * sigma) + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(k, k[::-1])


def test_blur_of_impulse_is_analytic_kernel():
    sigma, n = 1.7, 41
    img = np.zeros((n, n))
    img[n // 2, n // 2] = 1.0
    out = gaussian_blur(img, sigma)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c = n // 2
    expected = np.zeros_like(img)
    expected[c - radius:c + radius + 1, c - radius:c + radius + 1] = g
    assert np.abs(out - expected).max() <= 1e-6


def test_blur_reflect_preserves_constant():
    img = np.full((9, 9, 3), 0.3)
    np.testing.assert_allclose(gaussian_blur(img, 4.0), img, atol=1e-14)


def test_bicubic_rows_sum_to_one_and_identity():
    for n_in, n_out in [(64, 16), (16, 64), (13, 5), (7, 7)]:
        m = bicubic_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(bicubic_matrix(9, 9), np.eye(9), atol=1e-15)


def test_bicubic_reproduces_linear_ramp_interior():
    ramp = np.tile(np.arange(32, dtype=np.float64), (32, 1))
    up = resize_bicubic(ramp, 64, 64)
    centers = (np.arange(64) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(up[:, 4:-4], np.tile(centers[4:-4], (64, 1)), atol=1e-12)


def test_quality_scale_law():
    assert quality_scale(50) == 100.0
    assert quality_scale(25) == 200.0
    assert quality_scale(90) == pytest.approx(20.0)
    t = quant_tables()
    np.testing.assert_array_equal(scaled_table(t["luminance"], 50), t["luminance"])
    np.testing.assert_array_equal(scaled_table(t["chrominance"], 50), t["chrominance"])
    assert scaled_table(t["luminance"], 100).max() == 1.0
    assert scaled_table(t["luminance"], 1).max() == 255.0


def test_tables_are_standard():
    t = quant_tables()
    assert t["luminance"][0, 0] == 16 and t["luminance"][7, 7] == 99
    assert t["chrominance"][0, 0] == 17 and t["chrominance"][7, 7] == 99


def test_jpeg_high_quality_on_gradient():
    x = np.linspace(0, 1, 64)
    img = np.stack([np.add.outer(x, x) / 2, np.add.outer(x, 1 - x) / 2, np.full((64, 64), 0.4)], -1)
    assert psnr(jpeg_approx(img, 100), img) >= 40.0


def test_jpeg_twice_close_to_once(natural):
    once = jpeg_approx(natural, 40)
    twice = jpeg_approx(once, 40)
    assert abs(psnr(once, natural) - psnr(twice, natural)) < 3.0


def test_jpeg_quality_bounds_and_gray():
    img = np.full((8, 8), 0.5)
    with pytest.raises(ValueError):
        jpeg_approx(img, 0)
    with pytest.raises(ValueError):
        jpeg_approx(img, 101)
    assert jpeg_approx(np.random.default_rng(0).uniform(size=(10, 13)), 60).shape == (10, 13)


def test_constant_image_stays_constant():
    delta, q = 1.0, 70
    t = quant_tables()
    q_lum = scaled_table(t["luminance"], q)[0, 0]
    q_chrom = scaled_table(t["chrominance"], q)[0, 0]
    # DC rounding moves a block mean by at most Q/16 per plane; Cb feeds blue with gain 1.772.
    tol = (2 * delta + (q_lum + 1.772 * q_chrom) / 16) / 255
    for c in (0.2, 0.5, 0.73):
        y = np.full((64, 64, 3), c)
        for seed in range(4):
            out = degrade_pipeline(y, DegradationParams(0.1, 4.0, delta, q), seed)
            assert np.abs(out - c).max() <= tol


def test_pipeline_deterministic_and_seed_sensitive(natural):
    p = DegradationParams(1.5, 4.0, 10.0, 50)
    a, b = degrade_pipeline(natural, p, 3), degrade_pipeline(natural, p, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, degrade_pipeline(natural, p, 4))
    assert a.shape == natural.shape


def test_lower_quality_lower_psnr(natural):
    lo = degrade_pipeline(natural, DegradationParams(0.5, 4.0, 2.0, 30), 0)
    hi = degrade_pipeline(natural, DegradationParams(0.5, 4.0, 2.0, 70), 0)
    assert psnr(lo, natural) <= psnr(hi, natural) + 0.01


@settings(max_examples=25, deadline=None)
@given(sigma=st.floats(0.1, 10), r=st.floats(4, 20), delta=st.floats(1, 20),
       q=st.integers(30, 70), seed=st.integers(0, 2**31))
def test_pipeline_output_in_unit_range(sigma, r, delta, q, seed):
    y = np.random.default_rng(seed).uniform(size=(48, 48, 3))
    out = degrade_pipeline(y, DegradationParams(sigma, r, delta, q), seed)
    assert out.shape == y.shape and out.min() >= 0.0 and out.max() <= 1.0


def test_too_small_downsample():
    y = np.zeros((16, 16, 3))
    with pytest.raises(ValueError):
        degrade_pipeline(y, DegradationParams(1.0, 12.0, 1.0, 50), 0)
    with pytest.raises(ValueError):
        degrade_pipeline(np.zeros((6, 6, 3)), DegradationParams(1.0, 2.0, 1.0, 50), 0)


def test_manifest_round_trip(tmp_path):
    rows = [(f"img{k}.png", sample_degradation(k), 1000 + k) for k in range(5)]
    write_manifest(tmp_path / "m.csv", rows)
    assert read_manifest(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "filename,sigma,r,delta,q,noise_seed"
