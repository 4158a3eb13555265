import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from coordfit.errors import ContractViolation, FormatError, OutOfBoundsError
from coordfit.imaging import (bilinear_sample, png_read, png_write, psnr, read_raw, sobel_gradient,
                              ssim, to_gray, write_raw)


def ssim_by_windows(a, b, size=11, sigma=1.5):
    """Reference SSIM: explicit loop over every valid window position."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def sobel_by_loops(img):
    """Reference Sobel: per-pixel 3x3 sums with mirrored borders."""
    H, W = img.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)

    def at(r, c):
        r = -r - 1 if r < 0 else (2 * H - r - 1 if r >= H else r)
        c = -c - 1 if c < 0 else (2 * W - c - 1 if c >= W else c)
        return img[r, c]

    for r in range(H):
        for c in range(W):
            for i in range(3):
                for j in range(3):
                    v = at(r + i - 1, c + j - 1)
                    gx[r, c] += kx[i, j] * v
                    gy[r, c] += kx[j, i] * v
    return gx, gy


class TestBilinear:
    def test_integer_hits_pixel(self):
        img = np.random.default_rng(0).uniform(size=(5, 7, 3))
        assert_array_equal(bilinear_sample(img, np.array([[3.0, 2.0]]))[0], img[2, 3])

    def test_midpoint(self):
        img = np.array([[0.0, 1.0]])[..., None]
        assert bilinear_sample(img, np.array([0.5, 0.0]))[0] == 0.5

    def test_ramp(self):
        H, W = 9, 13
        ramp = np.tile(np.arange(W) / (W - 1), (H, 1))[..., None]
        u = np.random.default_rng(1).uniform([0, 0], [W - 1, H - 1], (500, 2))
        assert_allclose(bilinear_sample(ramp, u)[:, 0], u[:, 0] / (W - 1), atol=1e-14)

    def test_bilinear_function_reproduced(self):
        # f = a + bx + cy + dxy is reproduced exactly by bilinear interpolation
        H, W = 6, 8
        yy, xx = np.mgrid[0:H, 0:W].astype(float)
        img = (0.1 + 0.02 * xx + 0.03 * yy + 0.004 * xx * yy)[..., None]
        u = np.random.default_rng(2).uniform([0, 0], [W - 1, H - 1], (200, 2))
        ref = 0.1 + 0.02 * u[:, 0] + 0.03 * u[:, 1] + 0.004 * u[:, 0] * u[:, 1]
        assert_allclose(bilinear_sample(img, u)[:, 0], ref, atol=1e-14)

    def test_last_row_and_column(self):
        img = np.random.default_rng(3).uniform(size=(4, 4, 1))
        assert bilinear_sample(img, np.array([3.0, 3.0]))[0] == img[3, 3, 0]

    @pytest.mark.parametrize("u", [[-0.5, 0.0], [0.0, 4.2], [7.01, 1.0]])
    def test_out_of_range(self, u):
        with pytest.raises(OutOfBoundsError):
            bilinear_sample(np.zeros((5, 7, 1)), np.array(u))


class TestPSNR:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).uniform(size=(4, 4, 3))
        assert psnr(a, a) == math.inf

    def test_uniform_offset(self):
        a = np.full((8, 8, 3), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_direct(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(2, 16, 16, 3))
        mse = np.mean((a - b) ** 2)
        assert psnr(a, b) == pytest.approx(-10 * math.log10(mse), rel=1e-14)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(20, 20))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_is_negative(self):
        a = (np.random.default_rng(1).uniform(size=(24, 24)) > 0.5).astype(float)
        assert ssim(a, 1 - a) < 0

    def test_matches_window_loop(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(18, 21))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_by_windows(a, b), rel=1e-10)

    def test_rgb_uses_luma(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(2, 16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim_by_windows(to_gray(a), to_gray(b)), rel=1e-10)

    def test_seeded_regression(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(0.9873227984395961, rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ContractViolation):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))


class TestSobel:
    def test_constant(self):
        gx, gy = sobel_gradient(np.full((6, 6), 0.4))
        assert_allclose(gx, 0, atol=1e-16)
        assert_allclose(gy, 0, atol=1e-16)

    def test_unit_ramp(self):
        img = np.tile(np.arange(10.0), (7, 1))
        gx, gy = sobel_gradient(img)
        assert_allclose(gx[1:-1, 1:-1], 1.0, rtol=0, atol=1e-15)
        assert_allclose(gy[1:-1, 1:-1], 0.0, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_plane(self, alpha, beta):
        yy, xx = np.mgrid[0:8, 0:9].astype(float)
        gx, gy = sobel_gradient(alpha * xx + beta * yy)
        assert np.max(np.abs(gx[1:-1, 1:-1] - alpha)) < 1e-12
        assert np.max(np.abs(gy[1:-1, 1:-1] - beta)) < 1e-12

    def test_matches_loop(self):
        img = np.random.default_rng(0).uniform(size=(9, 11))
        gx, gy = sobel_gradient(img)
        rx, ry = sobel_by_loops(img)
        assert_allclose(gx, rx, atol=1e-15)
        assert_allclose(gy, ry, atol=1e-15)


class TestPNG:
    def test_round_trip_8bit(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(7, 9, 3))
        png_write(tmp_path / "a.png", img)
        back = png_read(tmp_path / "a.png")
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 1 / 255

    def test_round_trip_16bit_grey(self, tmp_path):
        img = np.random.default_rng(1).uniform(size=(5, 6, 1))
        png_write(tmp_path / "d.png", img, bits=16)
        assert np.max(np.abs(png_read(tmp_path / "d.png") - img)) <= 0.5 / 65535 + 1e-15

    def test_white_pixel(self, tmp_path):
        Image.new("RGB", (1, 1), (255, 255, 255)).save(tmp_path / "w.png")
        assert_array_equal(png_read(tmp_path / "w.png"), np.ones((1, 1, 3)))

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"\x89PNX\r\n\x1a\n" + bytes(40))
        with pytest.raises(FormatError):
            png_read(tmp_path / "bad.png")

    def test_truncated_file(self, tmp_path):
        png_write(tmp_path / "a.png", np.zeros((8, 8, 3)))
        blob = (tmp_path / "a.png").read_bytes()
        (tmp_path / "t.png").write_bytes(blob[:40])
        with pytest.raises(FormatError):
            png_read(tmp_path / "t.png")

    def test_16bit_colour_rejected(self, tmp_path):
        with pytest.raises(ContractViolation):
            png_write(tmp_path / "c.png", np.zeros((2, 2, 3)), bits=16)


class TestRaw:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 4, 2)).astype(np.float32)
        write_raw(tmp_path / "a.cfr", arr)
        assert_array_equal(read_raw(tmp_path / "a.cfr"), arr)

    def test_bad_header(self, tmp_path):
        (tmp_path / "a.cfr").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError):
            read_raw(tmp_path / "a.cfr")

    def test_truncated_payload(self, tmp_path):
        write_raw(tmp_path / "a.cfr", np.zeros((4, 4)))
        blob = (tmp_path / "a.cfr").read_bytes()
        (tmp_path / "b.cfr").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            read_raw(tmp_path / "b.cfr")
