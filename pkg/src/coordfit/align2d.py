"""Planar alignment: jointly fit a 2-D coordinate network and per-patch homographies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value, grad_wrt_params
from .config import PRECISIONS, PRESETS, build_network
from .errors import ConfigError, ContractViolation, NonFiniteError, OutOfBoundsError
from .geometry import apply_homography, exp_sl3, sl3_pose_error, warp2d
from .imaging import bilinear_sample, psnr, ssim
from .nets import interpolate_weights
from .optim import AdamState, adam_step, lr_at
from .runtime import tune_allocator

TRANSLATION_GENERATORS = (0, 1)


def synthetic_image(size=256, seed=0, n_blobs=80):
    """Smooth procedural RGB test image in [0, 1]: colour ramps plus Gaussian blobs of mixed scale."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.5 + rng.uniform(-0.2, 0.2, 3) * (xx[..., None] - 0.5) \
        + rng.uniform(-0.2, 0.2, 3) * (yy[..., None] - 0.5)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(-0.1, 1.1, 2)
        std = np.exp(rng.uniform(np.log(0.015), np.log(0.12)))
        amp = rng.uniform(-0.45, 0.45, 3)
        img = img + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * std ** 2))[..., None]
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def patch_coordinates(res):
    """Pixel-centre coordinates (res*res, 2) of a res x res patch in [-1, 1]^2, row-major."""
    c = -1.0 + (2.0 * np.arange(res) + 1.0) / res
    rows, cols = np.meshgrid(c, c, indexing="ij")
    return np.stack([cols.ravel(), rows.ravel()], axis=-1)


@dataclass
class PatchSet:
    """Patches cut from ``image`` through ground-truth warps of a centred canonical box.

    Network coordinates live in the canonical frame, where the box spans
    [-1, 1]^2; ``box`` is its side length in source pixels.
    """

    patches: np.ndarray  # (P, R, R, C)
    gt_poses: np.ndarray  # (P, 8)
    coords: np.ndarray  # (R*R, 2)
    box: float
    image: np.ndarray

    @property
    def n(self):
        return self.patches.shape[0]

    @property
    def res(self):
        return self.patches.shape[1]

    @property
    def channels(self):
        return self.patches.shape[-1]

    @property
    def targets(self):
        return self.patches.reshape(self.n, -1, self.channels)

    @property
    def pixels_per_unit(self):
        """Source pixels per canonical unit; converts corner errors to pixels."""
        return self.box / 2.0

    def to_pixels(self, y):
        H, W = self.image.shape[:2]
        centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
        return centre + np.asarray(y) * self.box / 2.0

    def to_canonical(self, pix):
        H, W = self.image.shape[:2]
        centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
        return (np.asarray(pix, dtype=np.float64) - centre) / (self.box / 2.0)


def _magnitudes(magnitude):
    m = np.asarray(magnitude, dtype=np.float64)
    if m.ndim == 0:
        return np.full(8, float(m))
    if m.shape == (2,):
        out = np.full(8, m[1])
        out[list(TRANSLATION_GENERATORS)] = m[0]
        return out
    if m.shape == (8,):
        return m
    raise ContractViolation("magnitude is a scalar, (translation, other) or 8 values")


def make_patches(image, n, magnitude=(0.1, 0.05), rng=None, box=128, res=64, max_tries=100):
    """Cut ``n`` patches through random sl(3) warps; the first warp is the identity.

    Coefficients are drawn uniformly within the per-generator ``magnitude``;
    warps whose footprint leaves the image are redrawn up to ``max_tries``
    times before ``OutOfBoundsError`` is raised.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    H, W = image.shape[:2]
    if box >= min(H, W) or n < 1:
        raise ContractViolation("need at least one patch and a box smaller than the image")
    rng = np.random.default_rng(0) if rng is None else rng
    mags = _magnitudes(magnitude)
    coords = patch_coordinates(res)
    shell = PatchSet(np.zeros((0, res, res, image.shape[-1])), np.zeros((0, 8)), coords, box, image)
    poses, patches = [np.zeros(8)], []
    for _ in range(1, n):
        for _attempt in range(max_tries):
            p = rng.uniform(-1.0, 1.0, 8) * mags
            pix = shell.to_pixels(warp2d(coords, p))
            if np.all(pix >= 0) and np.all(pix[:, 0] <= W - 1) and np.all(pix[:, 1] <= H - 1):
                poses.append(p)
                break
        else:
            raise OutOfBoundsError(f"no in-bounds warp found in {max_tries} draws")
    for p in poses:
        pix = shell.to_pixels(warp2d(coords, p))
        patches.append(bilinear_sample(image, pix).reshape(res, res, -1))
    return PatchSet(np.stack(patches), np.stack(poses), coords, float(box), image)


@dataclass
class FitResult:
    poses: np.ndarray
    net: object
    timeline: list = field(default_factory=list)

    def final(self, key):
        return self.timeline[-1][key]


def corner_errors_px(patchset, poses):
    """Per-patch mean corner displacement in source pixels."""
    return np.array([sl3_pose_error(p, g) for p, g in zip(poses, patchset.gt_poses)]) \
        * patchset.pixels_per_unit


def reconstruct_patches(net, patchset, poses, iteration=None, chunk=16384):
    """Network prediction (P, R, R, C) of every patch under the given warps."""
    H = exp_sl3(np.asarray(poses, dtype=np.float64))
    y = apply_homography(H, np.broadcast_to(patchset.coords, (patchset.n,) + patchset.coords.shape))
    flat = y.reshape(-1, 2).astype(net.dtype)
    out = np.concatenate([net(flat[i:i + chunk], iteration).data
                          for i in range(0, len(flat), chunk)])
    return out.reshape(patchset.patches.shape)


def reconstruct_image(net, patchset, iteration=None, chunk=16384):
    """Network rendering of the whole source image in canonical coordinates (may extrapolate)."""
    H, W = patchset.image.shape[:2]
    rows, cols = np.mgrid[0:H, 0:W]
    pix = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    flat = patchset.to_canonical(pix).astype(net.dtype)
    out = np.concatenate([net(flat[i:i + chunk], iteration).data
                          for i in range(0, len(flat), chunk)])
    return out.reshape(H, W, -1)


def _evaluate(net, patchset, poses, iteration, with_poses):
    recon = reconstruct_patches(net, patchset, poses, iteration)
    row = {
        "psnr": float(psnr(np.clip(recon, 0, 1), patchset.patches)),
        "ssim": float(np.mean([ssim(np.clip(r, 0, 1), t)
                               for r, t in zip(recon, patchset.patches)])),
    }
    if with_poses:
        row["corner_err_px"] = float(np.mean(corner_errors_px(patchset, poses)))
    return row


def align2d_fit(patchset, preset, cfg, seed=None, net=None, known_poses=False,
                on_checkpoint=None):
    """Minimise the mean squared patch reconstruction error over network weights and warps.

    ``preset`` names the network family (see ``config.PRESETS``); ``net``
    optionally supplies initial weights.  With ``known_poses`` the warps are
    frozen at ground truth and only the network is fitted.  The first pose is
    held at the identity when ``cfg.gauge_fix`` is set.  Returns final
    poses, network and a timeline of metric rows.
    """
    if patchset.n < 2 and not known_poses:
        raise ContractViolation("joint alignment needs at least 2 patches")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network preset {preset!r}")
    tune_allocator()
    seed = cfg.seed if seed is None else seed
    dtype = PRECISIONS[cfg.precision]
    if net is None:
        net = build_network(preset, cfg.network, 2, patchset.channels, seed, dtype)
    else:
        net = net.astype(dtype)
    sched_theta, sched_pose = cfg.schedules(preset)
    rng = np.random.default_rng([seed, 2])

    P, npix = patchset.n, patchset.coords.shape[0]
    m = max(1, int(round(cfg.sample_fraction * npix)))
    coords = patchset.coords.astype(dtype)
    targets = patchset.targets.astype(dtype)
    anchored = cfg.gauge_fix
    n_free = P - 1 if anchored else P
    pose_leaf = Value(np.zeros((n_free, 8), dtype=dtype), requires_grad=True, name="poses")
    anchor = np.zeros((1, 8), dtype=dtype)

    theta = net.params()
    for i, p in enumerate(theta):
        p.name = p.name or f"theta{i}"
    theta_state = AdamState.create(theta)
    pose_state = AdamState.create([pose_leaf])

    def current_poses():
        if known_poses:
            return patchset.gt_poses.copy()
        if anchored:
            return np.concatenate([anchor, pose_leaf.data]).astype(np.float64)
        return pose_leaf.data.astype(np.float64)

    timeline = []
    last_ckpt = net.copy()
    loss_val = None  # no minibatch evaluated yet
    for it in range(cfg.iterations + 1):
        if it % cfg.metrics_every == 0 or it == cfg.iterations:
            row = {"iter": it, "loss": loss_val}
            row.update(_evaluate(net, patchset, current_poses(), it, not known_poses))
            row["lr_theta"] = lr_at(sched_theta, it)
            row["lr_pose"] = 0.0 if known_poses else lr_at(sched_pose, it)
            timeline.append(row)
        if it % cfg.checkpoint_every == 0:
            last_ckpt = net.copy()
            if on_checkpoint is not None:
                on_checkpoint(it, net, current_poses())
        if it == cfg.iterations:
            break

        if cfg.sample_fraction >= 1.0:
            idx = np.broadcast_to(np.arange(npix), (P, npix))
        else:
            idx = np.stack([rng.choice(npix, m, replace=False) for _ in range(P)])
        x = coords[idx]  # (P, m, 2)
        tgt = np.take_along_axis(targets, idx[..., None], axis=1)
        if known_poses:
            poses = Value(patchset.gt_poses.astype(dtype))
        elif anchored:
            poses = ad.concat([anchor, pose_leaf], axis=0)
        else:
            poses = pose_leaf
        y = apply_homography(exp_sl3(poses), x)
        pred = net(ad.reshape(y, (-1, 2)), iteration=it)
        diff = pred - tgt.reshape(-1, tgt.shape[-1])
        loss = ad.mean(diff * diff)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NonFiniteError(f"non-finite loss at iteration {it}", name="loss",
                                 checkpoint=last_ckpt)
        leaves = theta if known_poses else theta + [pose_leaf]
        grads = grad_wrt_params(loss, leaves)
        try:
            adam_step(theta_state, theta, [grads[p] for p in theta], lr_at(sched_theta, it))
            if not known_poses:
                adam_step(pose_state, [pose_leaf], [grads[pose_leaf]], lr_at(sched_pose, it))
        except NonFiniteError as exc:
            exc.checkpoint = last_ckpt
            raise
    return FitResult(current_poses(), net, timeline)


# presets whose own init does not reach an optimum start the reference fit elsewhere
REFERENCE_START = {"sine_random": "sine"}


def solve_theta_star(patchset, preset, cfg, seed=None):
    """Reference weights: fit the network with warps frozen at ground truth.

    The reference is meant to be an optimum, so a default-initialised sine
    network is fitted from the SIREN init instead of its own.
    """
    start = None
    if preset in REFERENCE_START:
        start = build_network(REFERENCE_START[preset], cfg.network, 2, patchset.channels,
                              cfg.seed if seed is None else seed, PRECISIONS[cfg.precision])
    return align2d_fit(patchset, preset, cfg, seed, net=start, known_poses=True).net


@dataclass
class SweepResult:
    rows: list  # dicts: network, alpha, seed, final_psnr, corner_err_px
    summary: list  # dicts: network, alpha, mean_psnr, band_2std, n

    def band(self, network, alpha):
        for r in self.summary:
            if r["network"] == network and np.isclose(r["alpha"], alpha):
                return r
        raise KeyError((network, alpha))


def init_robustness_sweep(patchset, cfg, theta_star, alphas, seeds, networks=None):
    """Fit from alpha * random + (1 - alpha) * reference weights for every alpha and seed.

    ``theta_star`` maps preset name to reference network.  The band is two
    sample standard deviations of the final patch PSNR across seeds.
    """
    networks = list(theta_star) if networks is None else list(networks)
    for name in networks:
        if name not in theta_star or theta_star[name] is None:
            raise ConfigError(f"missing reference weights for {name!r}")
    dtype = PRECISIONS[cfg.precision]
    rows = []
    for name in networks:
        for alpha in alphas:
            for seed in seeds:
                bar = build_network(name, cfg.network, 2, patchset.channels, seed, dtype)
                init = interpolate_weights(theta_star[name].astype(dtype), bar, float(alpha))
                res = align2d_fit(patchset, name, cfg, seed=seed, net=init)
                rows.append({"network": name, "alpha": float(alpha), "seed": int(seed),
                             "final_psnr": res.final("psnr"),
                             "corner_err_px": res.final("corner_err_px")})
    summary = []
    for name in networks:
        for alpha in alphas:
            vals = np.array([r["final_psnr"] for r in rows
                             if r["network"] == name and r["alpha"] == float(alpha)])
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            summary.append({"network": name, "alpha": float(alpha), "mean_psnr": float(vals.mean()),
                            "band_2std": 2.0 * std, "n": int(len(vals))})
    return SweepResult(rows, summary)
