"""Miniature radiance-field fitting with jointly optimised se(3) camera poses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value, grad_wrt_params
from .config import PRECISIONS, PRESETS, build_network
from .errors import ConfigError, ContractViolation, DegenerateConfigurationError, NonFiniteError
from .geometry import (Intrinsics, PoseErrors, Sim3, align_pose_to_estimate, exp_se3, exp_se3_rt,
                       log_se3, procrustes_sim3, rotation_angle_deg)
from .imaging import psnr, ssim
from .optim import AdamState, adam_step, lr_at
from .render import NetworkField, RenderConfig, default_scene, render_image, render_rays
from .runtime import tune_allocator

GT_SAMPLES = 256  # quadrature samples for ground-truth renders


@dataclass
class NerfDataset:
    images: np.ndarray  # (V, H, W, 3)
    gt_poses: np.ndarray  # (V, 6) camera-to-world se(3)
    holdout_images: np.ndarray
    holdout_poses: np.ndarray
    intr: Intrinsics
    scene: object
    render_cfg: RenderConfig

    @property
    def n_views(self):
        return self.images.shape[0]


def random_pose_perturbations(n, max_rotation_deg, max_translation, rng):
    """se(3) vectors of camera-to-world poses near the identity.

    Rotation angles are uniform in [max/2, max] about uniformly random axes;
    translations have uniformly random directions and norms in [max/2, max].
    """
    poses = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(max_rotation_deg) * rng.uniform(0.5, 1.0)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t = direction * max_translation * rng.uniform(0.5, 1.0)
        R = exp_se3(np.concatenate([np.zeros(3), axis * angle]))[:3, :3]
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = t
        poses.append(log_se3(T))
    return np.array(poses)


def dataset_poses(cfg, seed=None):
    """Ground-truth camera poses (training views first, then held-out views)."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 3])
    n = cfg.n_views + cfg.n_holdout
    if cfg.rotation_perturb_deg == 0 and cfg.translation_perturb == 0:
        return np.zeros((n, 6))
    return random_pose_perturbations(n, cfg.rotation_perturb_deg, cfg.translation_perturb, rng)


def make_dataset(cfg, seed=None):
    """Render training and held-out views of the synthetic sphere scene."""
    seed = cfg.seed if seed is None else seed
    scene = default_scene(cfg.n_spheres, seed, center_z=cfg.scene_depth,
                          texture_freq=cfg.texture_freq)
    poses = dataset_poses(cfg, seed)
    intr = Intrinsics.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    rcfg = RenderConfig(cfg.t_near, cfg.t_far, cfg.n_samples, True, tuple(cfg.background))
    gt_cfg = RenderConfig(cfg.t_near, cfg.t_far, GT_SAMPLES, False, tuple(cfg.background))
    images = np.stack([render_image(scene, *exp_se3_rt(p), intr, gt_cfg)[0] for p in poses])
    V = cfg.n_views
    return NerfDataset(images[:V], poses[:V], images[V:], poses[V:], intr, scene, rcfg)


def make_field(net, cfg):
    return NetworkField(net, center=(0.0, 0.0, cfg.scene_depth), scale=0.5,
                        density_scale=cfg.density_scale)


@dataclass
class NerfResult:
    poses: np.ndarray
    net: object
    timeline: list = field(default_factory=list)
    renders: dict = field(default_factory=dict)

    def final(self, key):
        return self.timeline[-1][key]


def unaligned_pose_errors(est, gt):
    Re, te = exp_se3_rt(np.asarray(est, dtype=np.float64))
    Rg, tg = exp_se3_rt(np.asarray(gt, dtype=np.float64))
    ident = Sim3(1.0, np.eye(3), np.zeros(3))
    return PoseErrors(ident, rotation_angle_deg(Re, Rg), np.linalg.norm(te - tg, axis=-1))


def evaluate_holdout(net, data, cfg, poses, iteration=None, known=False):
    """Render held-out views at ground-truth poses mapped into the estimated frame.

    Returns (mean PSNR, mean SSIM, rgb renders, depth renders, pose errors or None).
    """
    fieldfn = make_field(net, cfg)
    errors = None
    if not known:
        try:
            errors = procrustes_sim3(poses, data.gt_poses)
        except DegenerateConfigurationError:
            # coincident centres (e.g. all poses still at the identity): measure unaligned
            errors = unaligned_pose_errors(poses, data.gt_poses)
    rgbs, depths, ps, ss = [], [], [], []
    for img, p in zip(data.holdout_images, data.holdout_poses):
        R, t = exp_se3_rt(p)
        if errors is not None:
            R, t = align_pose_to_estimate(errors.alignment, R, t)
        rgb, depth = render_image(fieldfn, R.astype(net.dtype), t.astype(net.dtype), data.intr,
                                  data.render_cfg, iteration)
        rgbs.append(rgb)
        depths.append(depth)
        ps.append(psnr(np.clip(rgb, 0, 1), img))
        ss.append(ssim(np.clip(rgb, 0, 1), img))
    return float(np.mean(ps)), float(np.mean(ss)), rgbs, depths, errors


def nerf_fit(data, preset, cfg, seed=None, net=None, on_checkpoint=None):
    """Fit a radiance field to the training views, optionally solving for camera poses.

    ``cfg.pose_mode == "known"`` freezes poses at ground truth; otherwise
    every pose starts at the identity and is optimised with its own learning
    rate schedule.  Metric rows hold loss and learning rates every
    ``metrics_every`` iterations; held-out PSNR/SSIM and (when poses are
    optimised) Procrustes-aligned rotation/translation errors are added
    every ``eval_every`` iterations and at the end.
    """
    if data.n_views < 2:
        raise ContractViolation("need at least 2 training views")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network preset {preset!r}")
    tune_allocator()
    seed = cfg.seed if seed is None else seed
    dtype = PRECISIONS[cfg.precision]
    known = cfg.pose_mode == "known"
    if net is None:
        net = build_network(preset, cfg.network, 3, 4, seed, dtype)
    else:
        net = net.astype(dtype)
    fieldfn = make_field(net, cfg)
    sched_theta, sched_pose = cfg.schedules()
    rng = np.random.default_rng([seed, 4])

    V, H, W, _ = data.images.shape
    targets = data.images.reshape(V, H * W, 3).astype(dtype)
    dirs_all = data.intr.directions(data.intr.pixel_grid()).astype(dtype)
    pose_leaf = Value(np.zeros((V, 6), dtype=dtype), requires_grad=True, name="poses")
    theta = net.params()
    for i, p in enumerate(theta):
        p.name = p.name or f"theta{i}"
    theta_state = AdamState.create(theta)
    pose_state = AdamState.create([pose_leaf])

    def current_poses():
        return data.gt_poses.copy() if known else pose_leaf.data.astype(np.float64)

    timeline, renders = [], {}
    last_ckpt = net.copy()
    loss_val = None  # no minibatch evaluated yet
    for it in range(cfg.iterations + 1):
        if it % cfg.metrics_every == 0 or it == cfg.iterations or it % cfg.eval_every == 0:
            row = {"iter": it, "loss": loss_val}
            if it % cfg.eval_every == 0 or it == cfg.iterations:
                ps, ss, rgbs, depths, errors = evaluate_holdout(net, data, cfg, current_poses(),
                                                                it, known)
                row["psnr"], row["ssim"] = ps, ss
                if errors is not None:
                    row["rot_err_deg"] = errors.mean_rotation_deg
                    row["trans_err"] = errors.mean_translation
                renders = {"rgb": rgbs, "depth": depths}
            row["lr_theta"] = lr_at(sched_theta, it)
            row["lr_pose"] = 0.0 if known else lr_at(sched_pose, it)
            timeline.append(row)
        if it % cfg.checkpoint_every == 0:
            last_ckpt = net.copy()
            if on_checkpoint is not None:
                on_checkpoint(it, net, current_poses())
        if it == cfg.iterations:
            break

        view = rng.integers(0, V, cfg.rays)
        pix = rng.integers(0, H * W, cfg.rays)
        tgt = targets[view, pix]
        if known:
            R, t = exp_se3_rt(data.gt_poses[view].astype(dtype))
        else:
            R_all, t_all = exp_se3_rt(pose_leaf)
            R, t = R_all[view], t_all[view]
        out = render_rays(fieldfn, R, t, dirs_all[pix], data.render_cfg, rng, it)
        diff = out.rgb - tgt
        loss = ad.mean(diff * diff)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NonFiniteError(f"non-finite loss at iteration {it}", name="loss",
                                 checkpoint=last_ckpt)
        leaves = theta if known else theta + [pose_leaf]
        grads = grad_wrt_params(loss, leaves)
        try:
            adam_step(theta_state, theta, [grads[p] for p in theta], lr_at(sched_theta, it))
            if not known:
                adam_step(pose_state, [pose_leaf], [grads[pose_leaf]], lr_at(sched_pose, it))
        except NonFiniteError as exc:
            exc.checkpoint = last_ckpt
            raise
    return NerfResult(current_poses(), net, timeline, renders)
