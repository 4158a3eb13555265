"""Derivative maps and spectra of coordinate networks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import grad_wrt_input, grad_wrt_params
from .errors import ContractViolation
from .imaging import LUMA, sobel_gradient
from .nets import PositionalEmbedding, init_network
from .optim import AdamState, adam_step

MAX_HARMONIC_BUDGET = 64  # D * K above this is refused


@dataclass
class DerivativeMaps:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def magnitude(self):
        return np.hypot(self.dx, self.dy)


def derivative_map(net, grid, pixel_step, iteration=None, batch=8192):
    """Network derivative on a grid of coordinates, in Sobel units.

    ``grid`` is (H, W, 2) network coordinates (x along columns); ``pixel_step``
    is the coordinate increment between neighbouring pixels, used to convert
    d/dcoord into intensity change per pixel.  Colour outputs are reduced to
    luma before differentiation.
    """
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[:2]
    flat = grid.reshape(-1, 2)
    jac = np.concatenate([grad_wrt_input(net, flat[i:i + batch], iteration)
                          for i in range(0, len(flat), batch)])
    if jac.shape[1] == 3:
        g = np.einsum("c,bci->bi", LUMA, jac)
    else:
        g = jac[:, 0, :]
    g = g * pixel_step
    return DerivativeMaps(g[:, 0].reshape(H, W), g[:, 1].reshape(H, W))


def derivative_noise_score(maps, image):
    """Mean absolute deviation between network and Sobel derivative maps."""
    sx, sy = sobel_gradient(image)
    return float(np.mean(np.abs(maps.dx - sx) + np.abs(maps.dy - sy)) / 2)


# -- spectra ---------------------------------------------------------------


def analytic_spectrum_gaussian_1d(net, k, output=0):
    """Closed-form spectrum magnitude of a bias-free one-hidden-layer Gaussian net.

    Frequencies ``k`` are in cycles per unit.  For hidden unit i with input
    weight a_i and output weight c_i the term is
    c_i * 2 pi sigma / |a_i| * exp(-(sqrt(2) pi k sigma / a_i)^2); the sum's
    magnitude is returned.  The prefactor is sqrt(2 pi) times the continuous
    transform with kernel exp(-2 pi i k x); shapes are identical.
    """
    if len(net.weights) != 2 or net.input_dim != 1 or net.activation != "gaussian":
        raise ContractViolation("need a 1-D Gaussian network with exactly one hidden layer")
    if net.has_bias:
        raise ContractViolation("the closed form holds for bias-free networks only")
    a = net.weights[0].data[:, 0].astype(np.float64)
    c = net.weights[1].data[output].astype(np.float64)
    keep = np.abs(a) >= 1e-9
    if not np.all(keep):
        warnings.warn(f"excluding {np.sum(~keep)} hidden unit(s) with |w| < 1e-9", stacklevel=2)
    a, c = a[keep], c[keep]
    sigma = net.sigma
    k = np.asarray(k, dtype=np.float64)
    terms = c * (2 * np.pi * sigma / np.abs(a)) * np.exp(
        -((np.sqrt(2) * np.pi * sigma * k[..., None] / a) ** 2))
    return np.abs(terms.sum(axis=-1))


def sampled_spectrum_1d(fn, half_width, n, window=None):
    """|FFT| of fn sampled on [-half_width, half_width) scaled by dx (continuous-FT units).

    Returns (frequencies in cycles per unit, fftshift-ordered, magnitudes).
    """
    x = -half_width + 2 * half_width * np.arange(n) / n
    y = np.asarray(fn(x), dtype=np.float64).reshape(n)
    if window == "hann":
        y = y * np.hanning(n)
    dx = 2 * half_width / n
    mag = np.abs(np.fft.fftshift(np.fft.fft(y))) * dx
    freqs = np.fft.fftshift(np.fft.fftfreq(n, dx))
    return freqs, mag


def spectrum_correlation(net, half_width=None, n=4096, support=1e-3):
    """Pearson r between the closed form and the sampled spectrum over the supported band.

    The supported band is where the closed-form magnitude exceeds ``support``
    times its peak.  ``n`` is a minimum: it grows to a power of two that puts
    four samples per standard deviation of the narrowest hidden Gaussian.
    """
    a = np.abs(net.weights[0].data[:, 0])
    if half_width is None:
        # widest hidden Gaussian has std sigma / min|a|; cover 12 of them
        half_width = 12 * net.sigma / max(a.min(), 1e-6)
    dx_needed = net.sigma / max(a.max(), 1e-6) / 4
    n = max(n, 1 << int(np.ceil(np.log2(2 * half_width / dx_needed))))

    def fn(x):
        return net(x[:, None].astype(net.dtype)).data[:, 0]

    freqs, mag = sampled_spectrum_1d(fn, half_width, n)
    ana = analytic_spectrum_gaussian_1d(net, freqs)
    band = ana > support * ana.max()
    r = float(np.corrcoef(ana[band], mag[band])[0, 1])
    return r, freqs, mag, ana


def pe_harmonic_set(D, K):
    """Frequencies sum_d s_d 2^d pi (d = 1..D) over integer s with sum |s_d| < K.

    Returned sorted, deduplicated, in radians per unit.  D * K is capped at
    ``MAX_HARMONIC_BUDGET``.
    """
    if D < 1 or K < 1:
        raise ContractViolation("D and K must be at least 1")
    if D * K > MAX_HARMONIC_BUDGET:
        raise ContractViolation(f"D*K = {D * K} exceeds the enumeration cap {MAX_HARMONIC_BUDGET}")
    # integer multiples of 2 pi keep the set exact
    bases = [2 ** (d - 1) for d in range(1, D + 1)]
    found = {0}
    frontier = {(0, 0)}  # (value, used budget)
    for base in bases:
        nxt = set()
        for value, used in frontier:
            for s in range(-(K - 1 - used), K - used):
                nxt.add((value + s * base, used + abs(s)))
        frontier = nxt
    found = sorted({v for v, _ in frontier} | found)
    return 2 * np.pi * np.array(found, dtype=np.float64)


@dataclass
class SpikeReport:
    predicted_hz: np.ndarray
    considered_hz: np.ndarray
    hits: np.ndarray
    noise_floor: float

    @property
    def hit_fraction(self):
        return float(np.mean(self.hits)) if len(self.hits) else float("nan")


def spike_agreement(freqs, mag, predicted_hz, noise_floor, tolerance_bins=1):
    """Fraction of predicted spikes (above the noise floor) that sit on a local maximum.

    A prediction counts as a hit when a local maximum of ``mag`` lies within
    ``tolerance_bins`` bins of the predicted frequency.
    """
    interior = np.zeros_like(mag, dtype=bool)
    interior[1:-1] = (mag[1:-1] >= mag[:-2]) & (mag[1:-1] >= mag[2:])
    considered, hits = [], []
    for f in predicted_hz:
        if f < freqs[0] or f > freqs[-1]:
            continue
        idx = int(np.argmin(np.abs(freqs - f)))
        lo, hi = max(idx - tolerance_bins, 0), min(idx + tolerance_bins + 1, len(mag))
        if mag[lo:hi].max() <= noise_floor:
            continue
        considered.append(f)
        hits.append(bool(np.any(interior[lo:hi])))
    return SpikeReport(np.asarray(predicted_hz), np.asarray(considered), np.asarray(hits),
                       noise_floor)


def periodic_target(x, seed=0, harmonics=4):
    """Smooth signal of period 1 built from the first ``harmonics`` integer frequencies."""
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.2, 1.0, harmonics) / np.arange(1, harmonics + 1)
    phase = rng.uniform(0, 2 * np.pi, harmonics)
    k = np.arange(1, harmonics + 1)
    return np.sum(amp * np.sin(2 * np.pi * k * np.asarray(x)[..., None] + phase), axis=-1)


def fit_1d(net, x, y, iterations, lr=1e-3):
    """Full-batch Adam fit of a 1-D network to samples (x, y); returns the final loss."""
    xs = np.asarray(x, dtype=net.dtype)[:, None]
    ys = np.asarray(y, dtype=net.dtype)[:, None]
    theta = net.params()
    state = AdamState.create(theta)
    loss_val = float("nan")
    for _ in range(iterations):
        diff = net(xs) - ys
        loss = ad.mean(diff * diff)
        loss_val = float(loss.data)
        grads = grad_wrt_params(loss, theta)
        adam_step(state, theta, [grads[p] for p in theta], lr)
    return loss_val


@dataclass
class PeSpikeResult:
    report: SpikeReport
    freqs: np.ndarray  # cycles per unit, fftshift order
    magnitude: np.ndarray
    train_loss: float


def pe_spike_experiment(D=4, K=3, hidden=64, iterations=3000, seed=0, n=4096, half_width=1.0,
                        noise_factor=10.0, lr=1e-3):
    """Train a ReLU network on D positional bands and compare its spectrum with the harmonic set.

    The embedding omits the raw coordinate so the output has period 1; the
    network is sampled on ``[-half_width, half_width)`` and predictions from
    ``pe_harmonic_set(D, K)`` at non-negative frequencies are checked for
    local maxima.  The noise floor is ``noise_factor`` times the median
    spectrum magnitude.
    """
    pe = PositionalEmbedding(D, include_identity=False)
    net = init_network("relu", [1, hidden, hidden, 1], seed=seed, embedding=pe)
    x_train = -half_width + 2 * half_width * (np.arange(256) + 0.5) / 256
    loss = fit_1d(net, x_train, periodic_target(x_train, seed), iterations, lr)

    def fn(x):
        return net(x[:, None]).data[:, 0]

    freqs, mag = sampled_spectrum_1d(fn, half_width, n)
    predicted = pe_harmonic_set(D, K) / (2 * np.pi)
    predicted = predicted[predicted >= 0]
    report = spike_agreement(freqs, mag, predicted, noise_factor * float(np.median(mag)))
    return PeSpikeResult(report, freqs, mag, loss)
