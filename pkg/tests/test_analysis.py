import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from coordfit import autodiff as ad
from coordfit.analysis import (DerivativeMaps, analytic_spectrum_gaussian_1d, derivative_map,
                               derivative_noise_score, pe_harmonic_set, periodic_target,
                               sampled_spectrum_1d, spectrum_correlation, spike_agreement)
from coordfit.autodiff import grad_wrt_params
from coordfit.errors import ContractViolation
from coordfit.imaging import sobel_gradient
from coordfit.nets import init_network
from coordfit.optim import AdamState, LrSchedule, adam_step, lr_at


def shallow_gaussian(hidden=16, seed=0, sigma=0.1):
    return init_network("gaussian", [1, hidden, 1], seed=seed, sigma=sigma, bias=False)


def harmonic_set_brute_force(D, K):
    vals = set()
    for s in itertools.product(range(-K + 1, K), repeat=D):
        if sum(abs(v) for v in s) < K:
            vals.add(sum(v * 2 ** (d + 1) for d, v in enumerate(s)))
    return np.pi * np.array(sorted(vals), dtype=float)


def _grid(res):
    c = -1 + (2 * np.arange(res) + 1) / res
    gx, gy = np.meshgrid(c, c)
    return np.stack([gx, gy], axis=-1), 2.0 / res


class TestDerivativeMap:
    def test_zero_network(self):
        net = init_network("gaussian", [2, 8, 3], seed=0)
        for p in net.params():
            p.data[:] = 0.0
        grid, step = _grid(6)
        maps = derivative_map(net, grid, step)
        assert_array_equal(maps.magnitude, np.zeros((6, 6)))

    def test_matches_finite_differences(self):
        net = init_network("gaussian", [2, 16, 16, 1], seed=1, sigma=0.5)
        grid, step = _grid(5)
        maps = derivative_map(net, grid, step)
        h = 1e-6
        f = lambda pts: net(pts.reshape(-1, 2)).data[:, 0].reshape(5, 5)  # noqa: E731
        fdx = (f(grid + [h, 0]) - f(grid - [h, 0])) / (2 * h) * step
        fdy = (f(grid + [0, h]) - f(grid - [0, h])) / (2 * h) * step
        assert_allclose(maps.dx, fdx, rtol=1e-6, atol=1e-10)
        assert_allclose(maps.dy, fdy, rtol=1e-6, atol=1e-10)

    def test_rgb_reduced_to_luma(self):
        net = init_network("sine", [2, 8, 3], "siren_principled", seed=2)
        grid, step = _grid(4)
        maps = derivative_map(net, grid, step)
        jac = ad.grad_wrt_input(net, grid.reshape(-1, 2))
        luma = np.array([0.299, 0.587, 0.114]) @ jac
        assert_allclose(maps.dx.ravel(), luma[:, 0] * step, rtol=1e-12)

    def test_fitted_ramp_has_unit_slope(self):
        # a ramp rising by one intensity unit per pixel, fitted and differentiated
        res = 16
        grid, step = _grid(res)
        target = grid[..., 0] / step  # f = column index up to a constant
        target = target - target.mean()
        net = init_network("gaussian", [2, 128, 1], seed=0, sigma=0.5)
        theta = net.params()
        state = AdamState.create(theta)
        schedule = LrSchedule(1e-2, 1e-4, 3000)
        x = grid.reshape(-1, 2)
        y = target.reshape(-1, 1) / res  # keep outputs O(1) during the fit
        for i in range(3000):
            diff = net(x) - y
            loss = ad.mean(diff * diff)
            g = grad_wrt_params(loss, theta)
            adam_step(state, theta, [g[p] for p in theta], lr_at(schedule, i))
        maps = derivative_map(net, grid, step)
        mag = maps.magnitude[2:-2, 2:-2] * res
        assert np.all(np.abs(mag - 1.0) < 0.05), (mag.min(), mag.max())
        sx, _ = sobel_gradient(target)
        assert_allclose(sx[1:-1, 1:-1], 1.0, atol=1e-12)

    def test_noise_score(self):
        img = np.tile(np.arange(8.0), (8, 1))
        exact = DerivativeMaps(*sobel_gradient(img))
        assert derivative_noise_score(exact, img) == 0.0
        shifted = DerivativeMaps(exact.dx + 0.5, exact.dy)
        assert derivative_noise_score(shifted, img) == pytest.approx(0.25)


class TestAnalyticSpectrum:
    def test_zero_output_weights(self):
        net = shallow_gaussian()
        net.weights[1].data[:] = 0.0
        assert_array_equal(analytic_spectrum_gaussian_1d(net, np.linspace(-5, 5, 11)), 0.0)

    def test_half_magnitude_location(self):
        net = shallow_gaussian(hidden=1)
        a, sigma = 0.7, net.sigma
        net.weights[0].data[:] = a
        net.weights[1].data[:] = 1.3
        k_half = a * math.sqrt(math.log(2)) / (math.sqrt(2) * math.pi * sigma)
        peak = analytic_spectrum_gaussian_1d(net, np.array([0.0]))[0]
        assert analytic_spectrum_gaussian_1d(net, np.array([k_half]))[0] == pytest.approx(peak / 2)
        assert peak == pytest.approx(1.3 * 2 * math.pi * sigma / a)

    def test_single_unit_matches_quadrature(self):
        # continuous transform of c exp(-(a x)^2 / 2 sigma^2) by dense sampling
        net = shallow_gaussian(hidden=1)
        net.weights[0].data[:] = -0.4
        net.weights[1].data[:] = 0.8
        freqs, mag = sampled_spectrum_1d(lambda x: net(x[:, None]).data[:, 0], 4.0, 4096)
        ana = analytic_spectrum_gaussian_1d(net, freqs) / math.sqrt(2 * math.pi)
        assert_allclose(mag, ana, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        net = shallow_gaussian(hidden=12, seed=seed % 1000)
        k = np.linspace(-8, 8, 33)
        before = analytic_spectrum_gaussian_1d(net, k)
        perm = np.random.default_rng(seed).permutation(12)
        net.weights[0].data[:] = net.weights[0].data[perm]
        net.weights[1].data[:] = net.weights[1].data[:, perm]
        assert_allclose(analytic_spectrum_gaussian_1d(net, k), before, rtol=1e-12, atol=1e-15)

    def test_tiny_weight_excluded_with_warning(self):
        net = shallow_gaussian(hidden=3)
        net.weights[0].data[1] = 0.0
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            out = analytic_spectrum_gaussian_1d(net, np.array([0.0, 1.0]))
        assert any("excluding 1" in str(x.message) for x in w)
        assert np.all(np.isfinite(out))

    def test_contract(self):
        with pytest.raises(ContractViolation):
            analytic_spectrum_gaussian_1d(init_network("gaussian", [1, 4, 1], seed=0), [0.0])
        with pytest.raises(ContractViolation):
            analytic_spectrum_gaussian_1d(
                init_network("gaussian", [1, 4, 4, 1], seed=0, bias=False), [0.0])

    def test_random_nets_correlate(self):
        for seed in range(3):
            r, *_ = spectrum_correlation(shallow_gaussian(hidden=32, seed=seed))
            assert r > 0.9

    def test_widely_spread_input_weights(self):
        # a near-zero input weight widens the window; sampling must still resolve the narrow units
        net = shallow_gaussian(hidden=32, seed=0)
        net.weights[0].data[0, 0] = 5e-4
        net.weights[0].data[1, 0] = 1.0
        r, freqs, *_ = spectrum_correlation(net, n=1024)
        assert r > 0.99
        assert freqs.size > 1024


class TestHarmonicSet:
    def test_single_band(self):
        assert_allclose(pe_harmonic_set(1, 2), [-2 * np.pi, 0, 2 * np.pi])

    def test_two_bands(self):
        assert_allclose(pe_harmonic_set(2, 2), np.pi * np.array([-4, -2, 0, 2, 4]))

    @pytest.mark.parametrize("D,K", [(1, 1), (2, 3), (3, 3), (4, 3), (3, 4)])
    def test_matches_enumeration(self, D, K):
        assert_allclose(pe_harmonic_set(D, K), harmonic_set_brute_force(D, K))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 4))
    def test_symmetric_contains_zero(self, D, K):
        s = pe_harmonic_set(D, K)
        assert 0.0 in s
        assert_allclose(s, -s[::-1])

    @pytest.mark.parametrize("D", [1, 2, 3, 4])
    def test_extra_band_extends_top(self, D):
        small, big = pe_harmonic_set(D, 3), pe_harmonic_set(D + 1, 3)
        assert set(small) <= set(big)
        assert big.max() > small.max()

    def test_budget_guard(self):
        with pytest.raises(ContractViolation):
            pe_harmonic_set(20, 4)
        with pytest.raises(ContractViolation):
            pe_harmonic_set(0, 2)


class TestSpikeAgreement:
    def test_peaks_hit_and_floor(self):
        freqs = np.arange(-32, 32, dtype=float)
        mag = np.full(64, 0.01)
        mag[32 + 4] = 1.0
        mag[32 + 9] = 1.0
        rep = spike_agreement(freqs, mag, np.array([4.0, 9.0, 15.0]), noise_floor=0.1)
        assert_array_equal(rep.considered_hz, [4.0, 9.0])
        assert rep.hit_fraction == 1.0

    def test_off_by_two_misses(self):
        freqs = np.arange(-32, 32, dtype=float)
        mag = np.linspace(1, 2, 64)  # monotone, no interior maxima
        mag[32 + 6] = 5.0
        rep = spike_agreement(freqs, mag, np.array([4.0]), noise_floor=0.0)
        assert rep.hit_fraction == 0.0

    def test_periodic_target_period_one(self):
        x = np.linspace(-1, 1, 50)
        assert_allclose(periodic_target(x + 1.0), periodic_target(x), atol=1e-12)
