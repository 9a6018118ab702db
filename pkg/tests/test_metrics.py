import numpy as np
import pytest

from evsplat.metrics import (MetricReport, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
                             _gaussian_kernel, psnr, ssim)


class TestPsnr:
    def test_identical_capped(self, rng):
        img = rng.uniform(size=(16, 16))
        assert psnr(img, img) == 99.0

    def test_uniform_difference(self):
        a = np.full((8, 8), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_full_scale_difference(self):
        assert psnr(np.zeros((8, 8)), np.ones((8, 8))) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_noise(self, rng):
        img = rng.uniform(0.2, 0.8, size=(16, 16))
        noise = rng.normal(size=(16, 16))
        vals = [psnr(img, np.clip(img + a * noise, 0, 1)) for a in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_symmetric(self, rng):
        a = rng.uniform(size=(8, 8))
        b = rng.uniform(size=(8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def ssim_bruteforce(a, b):
    """Direct double-loop reference over valid window positions."""
    kern = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - SSIM_WINDOW + 1):
        for j in range(w - SSIM_WINDOW + 1):
            wa = a[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            wb = b[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            mu_a = np.sum(kern * wa)
            mu_b = np.sum(kern * wb)
            va = np.sum(kern * wa * wa) - mu_a ** 2
            vb = np.sum(kern * wb * wb) - mu_b ** 2
            cov = np.sum(kern * wa * wb) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self, rng):
        img = rng.uniform(size=(16, 16))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_pattern_negative(self):
        a = np.indices((16, 16)).sum(axis=0) % 2 * 1.0   # checkerboard
        assert ssim(a, 1.0 - a) < 0.0

    def test_matches_bruteforce_oracle(self, rng):
        a = rng.uniform(size=(14, 17))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_bruteforce(a, b), abs=1e-6)

    def test_symmetric(self, rng):
        a = rng.uniform(size=(12, 12))
        b = rng.uniform(size=(12, 12))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_bounded(self, rng):
        for _ in range(10):
            a = rng.uniform(size=(12, 12))
            b = rng.uniform(size=(12, 12))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestReport:
    def test_average_is_arithmetic_mean(self):
        rep = MetricReport()
        rep.add(0, 30.0, 0.9)
        rep.add(2, 34.0, 0.8)
        assert rep.psnr_avg == pytest.approx(32.0)
        assert rep.ssim_avg == pytest.approx(0.85)

    def test_json_and_table(self):
        rep = MetricReport()
        rep.add(1, 31.5, 0.95)
        doc = rep.to_json()
        assert '"psnr_avg"' in doc
        assert "31.50" in rep.table()
