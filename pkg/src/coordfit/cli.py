"""Command-line experiment runner: ``coordfit {align2d,nerf,render,analyze}``.

Every subcommand reads a YAML config (see ``configs/`` and ``docs/config.md``),
validates it fully before computing anything, writes its artifacts under
``--out`` and finishes with a ``manifest.json`` listing every file with its
SHA-256.  Exit codes: 0 success, 2 configuration error, 3 non-finite loss or
gradient, 1 any other failure to produce the requested artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import __version__
from .align2d import (align2d_fit, corner_errors_px, init_robustness_sweep, make_patches,
                      patch_coordinates, reconstruct_image, reconstruct_patches, solve_theta_star,
                      synthetic_image)
from .analysis import (derivative_map, derivative_noise_score, pe_spike_experiment,
                       spectrum_correlation)
from .config import (PRECISIONS, Align2DConfig, AnalyzeConfig, NerfConfig, RenderJobConfig,
                     load_config, provenance)
from .errors import (ConfigError, ContractViolation, DegenerateConfigurationError, FormatError,
                     NonFiniteError, OutOfBoundsError)
from .geometry import (Intrinsics, apply_homography, exp_se3_rt, exp_sl3, load_poses,
                       procrustes_sim3, save_poses)
from .imaging import bilinear_sample, png_read, png_write, sobel_gradient, to_gray, write_raw
from .nerf import GT_SAMPLES, dataset_poses, make_dataset, make_field, nerf_fit
from .nets import init_network, load_checkpoint, save_checkpoint
from .render import RenderConfig, default_scene, render_image
from .reporting import (ALIGN_COLUMNS, NERF_COLUMNS, RunManifest, draw_polygon, normalise, tile,
                        timeline_columns, write_csv, write_json)
from .runtime import tune_allocator

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3

COMMANDS = {
    "align2d": Align2DConfig,
    "nerf": NerfConfig,
    "render": RenderJobConfig,
    "analyze": AnalyzeConfig,
}

_CANONICAL_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
_GT_COLOR = (1.0, 1.0, 1.0)
_EST_COLOR = (1.0, 0.15, 0.1)


class _Job:
    """Resolved configuration plus paths, prepared before any compute."""

    def __init__(self, command, cfg, config_path, out_dir):
        self.command = command
        self.cfg = cfg
        self.base = os.path.dirname(os.path.abspath(config_path)) if config_path else os.getcwd()
        self.out_dir = out_dir

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base, path)


COMMAND_HELP = {
    "align2d": "jointly fit a network and homographies to warped image patches",
    "nerf": "fit a radiance field and camera poses to synthetic views",
    "render": "render the analytic scene or a trained field",
    "analyze": "derivative maps, spectra and the initialisation sweep",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="coordfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"coordfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        p.add_argument("--config", metavar="PATH", help="YAML config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}", help="output directory")
        p.add_argument("--precision", choices=sorted(PRECISIONS), help="override the config precision")
    return parser


def _apply_overrides(cfg, seed, precision):
    targets = [cfg]
    if isinstance(cfg, AnalyzeConfig):
        targets.append(cfg.align)
    if isinstance(cfg, RenderJobConfig):
        targets.append(cfg.scene)
    for t in targets:
        if seed is not None:
            t.seed = seed
        if precision is not None:
            t.precision = precision
    cfg.validate()


def prepare(command, config_path, seed=None, precision=None, out_dir="runs"):
    """Load, override and validate; check that referenced files exist.  Raises ConfigError."""
    cls = COMMANDS[command]
    cfg = load_config(config_path, cls) if config_path else cls()
    _apply_overrides(cfg, seed, precision)
    job = _Job(command, cfg, config_path, out_dir)
    for key, path in _referenced_files(cfg):
        if not os.path.isfile(job.resolve(path)):
            raise ConfigError(f"{key}: file not found: {path}", key=key)
    return job


def _referenced_files(cfg):
    if isinstance(cfg, Align2DConfig) and cfg.image != "synthetic":
        yield "image", cfg.image
    if isinstance(cfg, RenderJobConfig):
        for key in ("checkpoint", "poses"):
            if getattr(cfg, key):
                yield key, getattr(cfg, key)
    if isinstance(cfg, AnalyzeConfig):
        if cfg.mode in ("derivatives", "spectrum"):
            for name, path in cfg.checkpoints.items():
                yield f"checkpoints.{name}", path
        if cfg.mode == "init_sweep":
            for name in cfg.sweep_networks:
                yield f"theta_star.{name}", cfg.theta_star[name]
        if cfg.mode in ("derivatives", "init_sweep", "theta_star") and cfg.align.image != "synthetic":
            yield "align.image", cfg.align.image


# -- align2d -------------------------------------------------------------------


def _source_image(job, cfg):
    if cfg.image == "synthetic":
        return synthetic_image(cfg.image_size, seed=0)
    img = png_read(job.resolve(cfg.image))
    if min(img.shape[:2]) <= cfg.patch_box:
        raise ConfigError(f"image {cfg.image} is smaller than patch_box {cfg.patch_box}", key="image")
    return img


def _patch_set(job, cfg):
    image = _source_image(job, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    return make_patches(image, cfg.n_patches, (cfg.translation_magnitude, cfg.other_magnitude),
                        rng, box=cfg.patch_box, res=cfg.patch_res)


def box_corners_px(patchset, poses):
    """Source-pixel corners (P, 4, 2) of the canonical box under each warp."""
    H = exp_sl3(np.asarray(poses, dtype=np.float64))
    c = apply_homography(H, np.broadcast_to(_CANONICAL_CORNERS, (len(poses), 4, 2)))
    return patchset.to_pixels(c)


def pose_overlay(patchset, est_poses=None):
    img = patchset.image
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    for corners in box_corners_px(patchset, patchset.gt_poses):
        img = draw_polygon(img, corners, _GT_COLOR)
    if est_poses is not None:
        for corners in box_corners_px(patchset, est_poses):
            img = draw_polygon(img, corners, _EST_COLOR)
    return img


def _rgb(img):
    img = np.asarray(img, dtype=np.float64)
    return np.repeat(img, 3, axis=-1) if img.shape[-1] == 1 else img


def run_align2d(job, manifest):
    cfg = job.cfg
    patchset = _patch_set(job, cfg)
    png_write(manifest.path("source.png"), patchset.image)
    png_write(manifest.path("overlay_gt.png"), pose_overlay(patchset))
    png_write(manifest.path("patches.png"), tile([_rgb(p) for p in patchset.patches]))
    save_poses(manifest.path("poses_gt.txt"), patchset.gt_poses)
    known = cfg.pose_mode == "known"
    summary = []
    for name in cfg.networks:
        def checkpoint(it, net, poses, name=name):
            save_checkpoint(manifest.path(name, "checkpoints", f"iter_{it:06d}.npz"), net)
            save_poses(manifest.path(name, "checkpoints", f"poses_{it:06d}.txt"), poses)

        try:
            res = align2d_fit(patchset, name, cfg, known_poses=known, on_checkpoint=checkpoint)
        except NonFiniteError as exc:
            _save_last_good(manifest, name, exc)
            raise
        cols = ALIGN_COLUMNS if not known else [c for c in ALIGN_COLUMNS if c != "corner_err_px"]
        write_csv(manifest.path(name, "metrics.csv"), res.timeline, cols)
        save_poses(manifest.path(name, "poses_est.txt"), res.poses)
        save_checkpoint(manifest.path(name, "checkpoint.npz"), res.net)
        png_write(manifest.path(name, "overlay.png"), pose_overlay(patchset, res.poses))
        recon = np.clip(reconstruct_patches(res.net, patchset, res.poses), 0, 1)
        panels = [_rgb(p) for p in patchset.patches] + [_rgb(r) for r in recon]
        png_write(manifest.path(name, "patches_recon.png"), tile(panels, cols=patchset.n))
        full = np.clip(reconstruct_image(res.net, patchset), 0, 1)
        png_write(manifest.path(name, "full_recon.png"), full)
        per_patch = corner_errors_px(patchset, res.poses)
        row = {"network": name, "final_psnr": res.final("psnr"), "final_ssim": res.final("ssim"),
               "mean_corner_err_px": float(np.mean(per_patch))}
        write_csv(manifest.path(name, "corner_errors.csv"),
                  [{"patch": i, "corner_err_px": float(e)} for i, e in enumerate(per_patch)],
                  ["patch", "corner_err_px"])
        summary.append(row)
    write_csv(manifest.path("summary.csv"), summary,
              ["network", "final_psnr", "final_ssim", "mean_corner_err_px"])
    return {"summary": summary}


def _save_last_good(manifest, name, exc):
    if exc.checkpoint is not None:
        save_checkpoint(manifest.path(name, "last_good.npz"), exc.checkpoint)


# -- nerf ----------------------------------------------------------------------


def _depth_png(depth, cfg):
    return normalise(depth, cfg.t_near, cfg.t_far)[..., None]


def run_nerf(job, manifest):
    cfg = job.cfg
    data = make_dataset(cfg)
    png_write(manifest.path("train_views.png"), tile(list(data.images), cols=min(4, data.n_views)))
    png_write(manifest.path("holdout_gt.png"), tile(list(data.holdout_images)))
    save_poses(manifest.path("poses_gt.txt"), data.gt_poses)
    save_poses(manifest.path("poses_holdout_gt.txt"), data.holdout_poses)
    known = cfg.pose_mode == "known"
    table = []
    for name in cfg.networks:
        def checkpoint(it, net, poses, name=name):
            save_checkpoint(manifest.path(name, "checkpoints", f"iter_{it:06d}.npz"), net)
            save_poses(manifest.path(name, "checkpoints", f"poses_{it:06d}.txt"), poses)

        try:
            res = nerf_fit(data, name, cfg, on_checkpoint=checkpoint)
        except NonFiniteError as exc:
            _save_last_good(manifest, name, exc)
            raise
        write_csv(manifest.path(name, "metrics.csv"), res.timeline,
                  timeline_columns(res.timeline, NERF_COLUMNS))
        save_poses(manifest.path(name, "poses_est.txt"), res.poses)
        save_checkpoint(manifest.path(name, "checkpoint.npz"), res.net)
        for i, (rgb, depth) in enumerate(zip(res.renders["rgb"], res.renders["depth"])):
            png_write(manifest.path(name, f"holdout_{i}.png"), np.clip(rgb, 0, 1))
            png_write(manifest.path(name, f"holdout_{i}_depth.png"), _depth_png(depth, cfg), bits=16)
            write_raw(manifest.path(name, f"holdout_{i}_depth.cfr"), depth)
        row = {"network": name, "psnr": res.final("psnr"), "ssim": res.final("ssim")}
        if not known:
            errors = procrustes_sim3(res.poses, data.gt_poses)
            row["rotation_deg"] = errors.mean_rotation_deg
            row["translation"] = errors.mean_translation
            write_csv(manifest.path(name, "pose_errors.csv"),
                      [{"view": i, "rot_err_deg": float(r), "trans_err": float(t)}
                       for i, (r, t) in enumerate(zip(errors.rotation_deg, errors.translation))],
                      ["view", "rot_err_deg", "trans_err"])
        table.append(row)
    cols = ["network", "psnr", "ssim"] if known else \
        ["network", "rotation_deg", "translation", "psnr", "ssim"]
    write_csv(manifest.path("pose_table.csv"), table, cols)
    return {"summary": table}


# -- render --------------------------------------------------------------------


def run_render(job, manifest):
    cfg = job.cfg
    scene_cfg = cfg.scene
    dtype = PRECISIONS[cfg.precision]
    intr = Intrinsics.from_fov(scene_cfg.image_size, scene_cfg.image_size, scene_cfg.fov_deg)
    if cfg.checkpoint:
        net = load_checkpoint(job.resolve(cfg.checkpoint), dtype)
        if net.input_dim != 3 or net.output_dim != 4:
            raise ConfigError("checkpoint is not a radiance field (3 inputs, 4 outputs)",
                              key="checkpoint")
        fieldfn = make_field(net, scene_cfg)
        rcfg = RenderConfig(scene_cfg.t_near, scene_cfg.t_far, scene_cfg.n_samples, False,
                            tuple(scene_cfg.background))
    else:
        fieldfn = default_scene(scene_cfg.n_spheres, cfg.seed, center_z=scene_cfg.scene_depth,
                                texture_freq=scene_cfg.texture_freq)
        rcfg = RenderConfig(scene_cfg.t_near, scene_cfg.t_far, GT_SAMPLES, False,
                            tuple(scene_cfg.background))
    poses = load_poses(job.resolve(cfg.poses), 6) if cfg.poses else dataset_poses(scene_cfg, cfg.seed)
    rows = []
    for i, p in enumerate(poses):
        R, t = exp_se3_rt(p)
        rgb, depth = render_image(fieldfn, R.astype(dtype), t.astype(dtype), intr, rcfg)
        png_write(manifest.path(f"view_{i:03d}.png"), np.clip(rgb, 0, 1))
        png_write(manifest.path(f"view_{i:03d}_depth.png"), _depth_png(depth, scene_cfg), bits=16)
        write_raw(manifest.path(f"view_{i:03d}_depth.cfr"), depth)
        rows.append({"view": i, "mean_depth": float(np.mean(depth)),
                     "mean_intensity": float(np.mean(rgb))})
    save_poses(manifest.path("poses.txt"), poses)
    write_csv(manifest.path("views.csv"), rows, ["view", "mean_depth", "mean_intensity"])
    return {}


# -- analyze -------------------------------------------------------------------


def _reference_grid(job, cfg):
    """Canonical grid (R, R, 2), its pixel step, and the source image resampled onto it."""
    res = cfg.grid_res
    grid = patch_coordinates(res).reshape(res, res, 2)
    align = dataclasses.replace(cfg.align, image=cfg.image, image_size=cfg.image_size)
    image = _source_image(job, align)
    H, W = image.shape[:2]
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    pix = centre + grid * align.patch_box / 2.0
    ref = bilinear_sample(image, pix)
    return grid, 2.0 / res, ref


def _analyze_derivatives(job, manifest):
    cfg = job.cfg
    dtype = PRECISIONS[cfg.precision]
    grid, step, ref = _reference_grid(job, cfg)
    sx, sy = sobel_gradient(ref)
    sobel_mag = np.hypot(sx, sy)
    write_raw(manifest.path("sobel_dx.cfr"), sx)
    write_raw(manifest.path("sobel_dy.cfr"), sy)
    rows = []
    for name, path in cfg.checkpoints.items():
        net = load_checkpoint(job.resolve(path), dtype)
        if net.input_dim != 2:
            raise ConfigError(f"checkpoint {name!r} is not a 2-D image network",
                              key=f"checkpoints.{name}")
        maps = derivative_map(net, grid, step)
        rows.append({"network": name, "noise_score": derivative_noise_score(maps, to_gray(ref))})
        hi = max(float(sobel_mag.max()), float(maps.magnitude.max()))
        panel = tile([normalise(to_gray(ref))[..., None], normalise(sobel_mag, 0, hi)[..., None],
                      normalise(maps.magnitude, 0, hi)[..., None]])
        png_write(manifest.path(f"derivatives_{name}.png"), panel)
        write_raw(manifest.path(f"{name}_dx.cfr"), maps.dx)
        write_raw(manifest.path(f"{name}_dy.cfr"), maps.dy)
    write_csv(manifest.path("noise_scores.csv"), rows, ["network", "noise_score"])
    return {"summary": rows}


def spectrum_nets(cfg):
    """Random bias-free one-hidden-layer 1-D Gaussian networks used for the spectrum check."""
    return [init_network("gaussian", [1, cfg.hidden, 1], seed=cfg.seed + i, sigma=cfg.sigma,
                         bias=False, dtype=PRECISIONS[cfg.precision])
            for i in range(cfg.n_nets)]


def _analyze_spectrum(job, manifest):
    cfg = job.cfg
    if cfg.checkpoints:
        nets = {name: load_checkpoint(job.resolve(p), PRECISIONS[cfg.precision])
                for name, p in cfg.checkpoints.items()}
    else:
        nets = {f"random_{cfg.seed + i}": n for i, n in enumerate(spectrum_nets(cfg))}
    corr = {}
    for k, (name, net) in enumerate(nets.items()):
        try:
            r, freqs, mag, ana = spectrum_correlation(net, n=cfg.fft_samples)
        except ContractViolation as exc:
            raise ConfigError(f"checkpoint {name!r}: {exc}", key=f"checkpoints.{name}") from exc
        corr[name] = r
        if k == 0:
            write_csv(manifest.path("spectrum_curves.csv"),
                      [{"freq": f, "fft": m, "analytic": a} for f, m, a in zip(freqs, mag, ana)],
                      ["freq", "fft", "analytic"])
    spikes = pe_spike_experiment(cfg.pe_freqs, cfg.pe_order, iterations=cfg.pe_iterations,
                                 seed=cfg.seed, n=cfg.fft_samples)
    predicted = set(np.round(spikes.report.considered_hz, 9))
    write_csv(manifest.path("pe_spectrum.csv"),
              [{"freq": f, "magnitude": m, "predicted": bool(np.round(f, 9) in predicted)}
               for f, m in zip(spikes.freqs, spikes.magnitude)],
              ["freq", "magnitude", "predicted"])
    values = np.array(list(corr.values()))
    doc = {
        "correlations": corr,
        "mean_r": float(values.mean()),
        "min_r": float(values.min()),
        "frequency_convention": "cycles per unit; kernel exp(-2 pi i k x)",
        "pe_spikes": {
            "bands": cfg.pe_freqs, "order": cfg.pe_order,
            "considered_hz": spikes.report.considered_hz.tolist(),
            "hits": spikes.report.hits.tolist(),
            "hit_fraction": spikes.report.hit_fraction,
            "noise_floor": spikes.report.noise_floor,
            "train_loss": spikes.train_loss,
        },
    }
    write_json(manifest.path("spectrum.json"), doc)
    return {"summary": {"min_r": doc["min_r"], "pe_hit_fraction": spikes.report.hit_fraction}}


def _analyze_theta_star(job, manifest):
    cfg = job.cfg
    patchset = _patch_set(job, cfg.align)
    for name in cfg.sweep_networks:
        net = solve_theta_star(patchset, name, cfg.align)
        save_checkpoint(manifest.path(f"theta_star_{name}.npz"), net)
    return {}


def _analyze_init_sweep(job, manifest):
    cfg = job.cfg
    dtype = PRECISIONS[cfg.precision]
    patchset = _patch_set(job, cfg.align)
    stars = {n: load_checkpoint(job.resolve(cfg.theta_star[n]), dtype) for n in cfg.sweep_networks}
    result = init_robustness_sweep(patchset, cfg.align, stars, cfg.alphas, cfg.seeds,
                                   cfg.sweep_networks)
    for name in cfg.sweep_networks:
        write_csv(manifest.path(f"sweep_{name}.csv"),
                  [r for r in result.rows if r["network"] == name],
                  ["network", "alpha", "seed", "final_psnr", "corner_err_px"])
    write_csv(manifest.path("sweep_summary.csv"), result.summary,
              ["network", "alpha", "mean_psnr", "band_2std", "n"])
    return {"summary": result.summary}


def run_analyze(job, manifest):
    return {
        "derivatives": _analyze_derivatives,
        "spectrum": _analyze_spectrum,
        "theta_star": _analyze_theta_star,
        "init_sweep": _analyze_init_sweep,
    }[job.cfg.mode](job, manifest)


RUNNERS = {"align2d": run_align2d, "nerf": run_nerf, "render": run_render, "analyze": run_analyze}


def run(command, config_path=None, seed=None, precision=None, out_dir=None, stderr=None):
    """Programmatic entry point; returns the process exit code."""
    stderr = sys.stderr if stderr is None else stderr
    out_dir = out_dir or f"runs/{command}"
    where = config_path or "<defaults>"
    try:
        job = prepare(command, config_path, seed, precision, out_dir)
    except ConfigError as exc:
        line = f":{exc.line}" if exc.line is not None else ""
        print(f"{where}{line}: config error: {exc.detail}", file=stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out_dir}: {exc}", file=stderr)
        return EXIT_FAILURE
    tune_allocator()
    manifest = RunManifest(out_dir, command, job.cfg, job.cfg.seed, provenance(job.cfg))
    try:
        extra = RUNNERS[command](job, manifest)
        manifest.write(extra)
    except ConfigError as exc:
        print(f"{where}: config error: {exc.detail}", file=stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"non-finite value in {exc.name or 'optimisation'}: {exc}", file=stderr)
        return EXIT_NONFINITE
    except (FormatError, OutOfBoundsError, DegenerateConfigurationError, ContractViolation,
            OSError) as exc:
        print(f"{command} failed: {exc}", file=stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.seed, args.precision, args.out)


if __name__ == "__main__":
    sys.exit(main())
