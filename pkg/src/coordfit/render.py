"""Volume rendering by quadrature along camera rays."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ContractViolation
from .geometry import exp_se3_rt, transform_points


@dataclass(frozen=True)
class RenderConfig:
    t_near: float = 1.0
    t_far: float = 4.0
    n_samples: int = 64
    stratified: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    # last sample's interval; None closes it at t_far
    far_cap: float | None = None

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise ContractViolation("need 0 < t_near < t_far")
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        if self.far_cap is not None and self.far_cap <= 0:
            raise ContractViolation("far_cap must be positive")
        if len(self.background) != 3:
            raise ContractViolation("background is an rgb triplet")

    def last_delta(self, depths):
        if self.far_cap is not None:
            return np.full(np.shape(depths)[:-1] + (1,), float(self.far_cap))
        return self.t_far - np.asarray(depths)[..., -1:]


def stratified_depths(cfg, rng=None, n_rays=1):
    """(n_rays, N) depths: one uniform draw per equal bin, or bin midpoints."""
    edges = np.linspace(cfg.t_near, cfg.t_far, cfg.n_samples + 1)
    width = edges[1] - edges[0]
    if cfg.stratified:
        if rng is None:
            raise ContractViolation("stratified sampling needs an rng")
        u = rng.random((n_rays, cfg.n_samples))
    else:
        u = np.full((n_rays, cfg.n_samples), 0.5)
    return edges[:-1] + u * width


def sample_deltas(depths, cfg):
    """Spacing to the next sample, closed by ``cfg.last_delta`` for the final one."""
    depths = np.asarray(depths, dtype=np.float64)
    return np.concatenate([np.diff(depths, axis=-1), cfg.last_delta(depths)], axis=-1)


@dataclass
class Composite:
    rgb: Value
    weights: Value
    residual: Value
    depth: Value


def composite(sigma, color, depths, deltas, background=(0.0, 0.0, 0.0), eps=1e-10):
    """Composite per-sample density (B, N) and colour (B, N, 3) along each ray.

    T_i = exp(-sum_{j<i} sigma_j delta_j), w_i = T_i (1 - exp(-sigma_i delta_i));
    colour = sum_i w_i c_i + T_{N+1} * background; depth is the
    weight-normalised mean sample depth.
    """
    sigma = ad._lift(sigma)
    color = ad._lift(color, sigma)
    depths = np.asarray(depths, dtype=sigma.dtype)
    deltas = np.asarray(deltas, dtype=sigma.dtype)
    if np.any(np.diff(depths, axis=-1) <= 0):
        raise ContractViolation("sample depths must be strictly ascending")
    allw = ad.composite_weights(sigma * deltas)
    n = sigma.shape[-1]
    w = allw[..., :n]
    residual = allw[..., n:]
    bg = np.asarray(background, dtype=sigma.dtype)
    rgb = ad.sum_(ad.reshape(w, w.shape + (1,)) * color, axis=-2) + residual * bg
    acc = ad.clip_min(ad.sum_(w, axis=-1), eps)
    depth = ad.sum_(w * depths, axis=-1) / acc
    return Composite(rgb, w, ad.reshape(residual, residual.shape[:-1]), depth)


class NetworkField:
    """Radiance field from a 3 -> 4 coordinate network.

    World points are mapped to network coordinates by (x - center) / scale.
    Colour goes through a logistic map, density through softplus times
    ``density_scale``.
    """

    def __init__(self, net, center=(0.0, 0.0, 0.0), scale=1.0, density_scale=1.0):
        if net.input_dim != 3 or net.output_dim != 4:
            raise ContractViolation("radiance field networks map R^3 -> R^4")
        if scale <= 0 or density_scale <= 0:
            raise ContractViolation("scale and density_scale must be positive")
        self.net = net
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = float(scale)
        self.density_scale = float(density_scale)

    def __call__(self, points, iteration=None):
        shape = points.shape[:-1]
        dtype = self.net.dtype
        x = (ad.reshape(points, (-1, 3)) - self.center.astype(dtype)) * dtype.type(1.0 / self.scale)
        out = self.net(x, iteration=iteration)
        rgb = ad.sigmoid(ad.reshape(out[:, :3], shape + (3,)))
        sigma = ad.softplus(ad.reshape(out[:, 3], shape))
        if self.density_scale != 1.0:
            sigma = sigma * dtype.type(self.density_scale)
        return rgb, sigma


def render_rays(field_fn, R, t, directions, cfg, rng=None, iteration=None, depths=None):
    """Render rays with camera-frame directions (B, 3) under per-ray rotation/translation.

    ``R`` (B, 3, 3) or (3, 3) and ``t`` (B, 3) or (3,) may be Values on the
    tape.  Points are x_i = R (t_i d) + t with the unnormalised direction d.
    """
    directions = np.asarray(directions)
    B = directions.shape[0]
    if depths is None:
        depths = stratified_depths(cfg, rng, B)
    cam = depths[..., None] * directions[:, None, :]
    cam = cam.astype(np.result_type(directions.dtype, np.float32))
    if isinstance(R, Value) and R.ndim == 3:
        R = ad.reshape(R, (B, 1, 3, 3))
        t = ad.reshape(t, (B, 1, 3))
    elif not isinstance(R, Value) and np.ndim(R) == 3:
        R = np.asarray(R)[:, None]
        t = np.asarray(t)[:, None]
    points = transform_points(R, t, cam)
    if not isinstance(points, Value):
        points = Value(points)
    rgb, sigma = field_fn(points, iteration)
    return composite(sigma, rgb, depths, sample_deltas(depths, cfg), cfg.background)


def render_pixel(field_fn, p, u, intr, cfg, rng=None, iteration=None):
    """Colour (B, 3) of pixels u (B, 2) seen from pose p (6,), recorded on the tape."""
    R, t = exp_se3_rt(ad._lift(p))
    d = intr.directions(np.atleast_2d(u))
    return render_rays(field_fn, R, t, d, cfg, rng, iteration).rgb


def render_image(field_fn, R, t, intr, cfg, iteration=None, chunk=4096):
    """Deterministic (midpoint) render of a full view; returns rgb (H, W, 3) and depth (H, W)."""
    det = dataclasses.replace(cfg, stratified=False)
    pix = intr.pixel_grid()
    dirs = intr.directions(pix)
    R = np.asarray(R.data if isinstance(R, Value) else R)
    t = np.asarray(t.data if isinstance(t, Value) else t)
    rgbs, depths = [], []
    for i in range(0, len(dirs), chunk):
        out = render_rays(field_fn, R, t, dirs[i:i + chunk], det, iteration=iteration)
        rgbs.append(out.rgb.data)
        depths.append(out.depth.data)
    H, W = intr.height, intr.width
    return np.concatenate(rgbs).reshape(H, W, 3), np.concatenate(depths).reshape(H, W)


@dataclass
class SphereScene:
    """Soft-edged Lambertian spheres with an analytic density and colour field."""

    centers: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    density: float = 40.0
    softness: float = 0.02
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.5, 0.8]))
    ambient: float = 0.3
    texture_freq: float = 0.0  # cycles per unit of a 3-D sine pattern on the albedo; 0 disables
    texture_amp: float = 0.35

    def occupancy(self, x):
        x = np.asarray(x, dtype=np.float64)
        dist = np.linalg.norm(x[..., None, :] - self.centers, axis=-1)
        z = np.clip((self.radii - dist) / self.softness, -60.0, 60.0)
        return 1.0 / (1.0 + np.exp(-z)), dist

    def fields(self, x):
        """Density (...,) and colour (..., 3) at world points x (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        occ, dist = self.occupancy(x)
        sig = self.density * occ
        light = -np.asarray(self.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        normals = (x[..., None, :] - self.centers) / np.maximum(dist, 1e-9)[..., None]
        shade = self.ambient + (1 - self.ambient) * np.clip(normals @ light, 0.0, 1.0)
        cols = self.colors * shade[..., None]
        if self.texture_freq > 0:
            w = 2 * np.pi * self.texture_freq
            pattern = np.sin(w * x[..., 0]) * np.sin(w * x[..., 1]) * np.sin(w * x[..., 2])
            cols = cols * (1.0 + self.texture_amp * pattern)[..., None, None]
        total = sig.sum(axis=-1)
        mix = (sig[..., None] * cols).sum(axis=-2) / np.maximum(total, 1e-12)[..., None]
        return total, np.clip(mix, 0.0, 1.0)

    def __call__(self, points, iteration=None):
        data = points.data if isinstance(points, Value) else np.asarray(points)
        sig, col = self.fields(data)
        return Value(col.astype(data.dtype)), Value(sig.astype(data.dtype))


def default_scene(n_spheres=3, seed=0, center_z=2.0, texture_freq=0.0):
    """2-4 distinctly coloured spheres inside the unit box centred at (0, 0, center_z)."""
    if not 2 <= n_spheres <= 4:
        raise ContractViolation("the synthetic scene holds 2 to 4 spheres")
    rng = np.random.default_rng(seed)
    layout = np.array([[-0.22, -0.12, 0.25], [0.2, 0.18, -0.2], [0.18, -0.22, 0.3],
                       [-0.2, 0.25, -0.3]])
    colors = np.array([[0.9, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.95],
                       [0.95, 0.8, 0.2]])
    radii = np.array([0.22, 0.26, 0.16, 0.16])
    centers = layout[:n_spheres] + rng.uniform(-0.03, 0.03, (n_spheres, 3))
    centers[:, 2] += center_z
    return SphereScene(centers, radii[:n_spheres], colors[:n_spheres], texture_freq=texture_freq)
