import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnerf.metrics import MetricReport, psnr, ssim
from oracles import ssim_reference


def test_psnr_identical_images_is_inf():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert math.isinf(psnr(img, img))


def test_psnr_known_mse_values():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    c = np.ones((10, 10))
    assert psnr(a, c) == pytest.approx(0.0, abs=1e-9)


def test_psnr_dimension_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_identical_images():
    img = np.random.default_rng(1).random((24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_binary_image_strongly_negative_and_matches_oracle():
    rng = np.random.default_rng(2)
    a = (rng.random((20, 20)) > 0.5).astype(np.float64)
    b = 1.0 - a
    ours = ssim(a, b)
    ref = ssim_reference(a, b)
    assert ours == pytest.approx(ref, abs=1e-9)
    assert ours < -0.3


def test_ssim_matches_naive_oracle_on_random_images():
    rng = np.random.default_rng(3)
    a = rng.random((16, 18, 3))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-9)


def test_ssim_constant_images_luminance_closed_form():
    mu_a, mu_b = 0.3, 0.7
    a = np.full((16, 16), mu_a)
    b = np.full((16, 16), mu_b)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = ((2 * mu_a * mu_b + c1) * c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_small_image_single_window_fallback():
    rng = np.random.default_rng(4)
    a = rng.random((6, 6))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.random((6, 6))
    assert -1.0 <= ssim(a, b) <= 1.0


def test_symmetry():
    rng = np.random.default_rng(5)
    a = rng.random((14, 14, 3))
    b = rng.random((14, 14, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_psnr_decreases_with_noise_amplitude(seed):
    rng = np.random.default_rng(seed)
    base = rng.random((12, 12, 3))
    noise = rng.normal(0, 1, size=base.shape)
    values = [psnr(base, np.clip(base + amp * noise, 0, 1))
              for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_report_aggregation_and_serialization():
    report = MetricReport()
    report.add(0, 0, 30.0, 0.9)
    report.add(0, 1, float("inf"), 1.0)
    report.add(1, 0, 20.0, 0.8)
    means = report.instance_means()
    assert means[0]["psnr_db"] == pytest.approx(30.0)
    assert means[1]["psnr_db"] == pytest.approx(20.0)
    payload = json.loads(report.to_json())
    assert payload["rows"][1]["psnr_db"] is None  # inf sentinel -> null
    csv_text = report.to_csv()
    assert "inf" in csv_text
    assert csv_text.splitlines()[0] == "instance,view,psnr_db,ssim"
