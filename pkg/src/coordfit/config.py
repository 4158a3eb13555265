"""Experiment configuration: dataclass schemas loaded from YAML with line-accurate errors."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError
from .nets import DEFAULT_OMEGA0, DEFAULT_SIGMA, AnnealSchedule, PositionalEmbedding, init_network
from .optim import LrSchedule

PRECISIONS = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class Preset:
    activation: str
    init_scheme: str
    embedding: str | None  # None, "pe" or "pe_annealed"
    lr_theta_2d: tuple
    lr_pose_2d: tuple


_BARF_LR = ((1e-3, 1e-4), (3e-3, 1e-4))
_SIREN_LR = ((1e-4, 1e-5), (1e-4, 1e-5))

PRESETS = {
    "gaussian": Preset("gaussian", "default_uniform", None, *_BARF_LR),
    "sine": Preset("sine", "siren_principled", None, *_SIREN_LR),
    "sine_random": Preset("sine", "default_uniform", None, *_SIREN_LR),
    "pe_annealed": Preset("relu", "default_uniform", "pe_annealed", *_BARF_LR),
    "pe": Preset("relu", "default_uniform", "pe", *_BARF_LR),
    "relu": Preset("relu", "default_uniform", None, *_BARF_LR),
}


@dataclass
class NetworkConfig:
    hidden: int = 256
    hidden_layers: int = 4
    sigma: float = DEFAULT_SIGMA
    omega0: float = DEFAULT_OMEGA0
    pe_freqs: int = 8
    anneal_start: int = 0
    anneal_end: int = 2000
    bias: bool = True

    def validate(self, where="network"):
        _positive(self.hidden, f"{where}.hidden")
        _positive(self.hidden_layers, f"{where}.hidden_layers")
        _positive(self.sigma, f"{where}.sigma")
        _positive(self.omega0, f"{where}.omega0")
        _positive(self.pe_freqs, f"{where}.pe_freqs")
        if self.anneal_end < self.anneal_start:
            raise ConfigError(f"{where}: anneal_end precedes anneal_start", key=f"{where}.anneal_end")


def build_network(preset_name, netcfg, input_dim, output_dim, seed, dtype=np.float64):
    """Fresh network for a named preset (see ``PRESETS``)."""
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown network preset {preset_name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[preset_name]
    emb = None
    if preset.embedding == "pe":
        emb = PositionalEmbedding(netcfg.pe_freqs)
    elif preset.embedding == "pe_annealed":
        emb = PositionalEmbedding(netcfg.pe_freqs,
                                  anneal=AnnealSchedule(netcfg.anneal_start, netcfg.anneal_end))
    dims = [input_dim] + [netcfg.hidden] * netcfg.hidden_layers + [output_dim]
    net = init_network(preset.activation, dims, preset.init_scheme, seed, sigma=netcfg.sigma,
                       omega0=netcfg.omega0, embedding=emb, bias=netcfg.bias, dtype=dtype)
    net.meta["preset"] = preset_name
    return net


@dataclass
class Align2DConfig:
    seed: int = 0
    precision: str = "f64"
    networks: list = field(default_factory=lambda: ["gaussian"])
    image: str = "synthetic"
    image_size: int = 256
    n_patches: int = 6
    patch_box: int = 128
    patch_res: int = 64
    translation_magnitude: float = 0.1
    other_magnitude: float = 0.05
    iterations: int = 5000
    sample_fraction: float = 0.15
    gauge_fix: bool = True
    pose_mode: str = "joint"  # joint | known
    metrics_every: int = 100
    checkpoint_every: int = 1000
    lr_theta: list | None = None
    lr_pose: list | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self):
        _common(self)
        _positive(self.image_size, "image_size")
        if self.n_patches < 2 and self.pose_mode == "joint":
            raise ConfigError("joint alignment needs at least 2 patches", key="n_patches")
        _positive(self.n_patches, "n_patches")
        _positive(self.patch_res, "patch_res")
        if not 0 < self.patch_box < self.image_size:
            raise ConfigError("patch_box must be positive and smaller than the image", key="patch_box")
        if self.translation_magnitude < 0 or self.other_magnitude < 0:
            raise ConfigError("perturbation magnitudes must be non-negative", key="translation_magnitude")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must lie in (0, 1]", key="sample_fraction")
        if self.pose_mode not in ("joint", "known"):
            raise ConfigError(f"pose_mode must be 'joint' or 'known', got {self.pose_mode!r}",
                              key="pose_mode")

    def schedules(self, preset_name):
        p = PRESETS[preset_name]
        th = self.lr_theta or p.lr_theta_2d
        po = self.lr_pose or p.lr_pose_2d
        return LrSchedule(*th, self.iterations), LrSchedule(*po, self.iterations)


@dataclass
class NerfConfig:
    seed: int = 0
    precision: str = "f64"
    networks: list = field(default_factory=lambda: ["gaussian"])
    n_views: int = 8
    n_holdout: int = 2
    image_size: int = 64
    fov_deg: float = 40.0
    n_spheres: int = 3
    scene_depth: float = 2.0
    texture_freq: float = 0.0
    density_scale: float = 1.0
    rotation_perturb_deg: float = 5.0
    translation_perturb: float = 0.05
    pose_mode: str = "identity_init"  # identity_init | known
    iterations: int = 20000
    rays: int = 2048
    n_samples: int = 128
    t_near: float = 1.0
    t_far: float = 3.0
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    metrics_every: int = 100
    checkpoint_every: int = 1000
    eval_every: int = 1000
    lr_theta: list = field(default_factory=lambda: [1e-4, 5e-5])
    lr_pose: list = field(default_factory=lambda: [3e-3, 1e-5])
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(hidden_layers=6))

    def validate(self):
        _common(self)
        if self.n_views < 2:
            raise ConfigError("need at least 2 training views", key="n_views")
        if self.n_holdout < 1:
            raise ConfigError("need at least 1 held-out view", key="n_holdout")
        _positive(self.image_size, "image_size")
        if not 0 < self.fov_deg < 180:
            raise ConfigError("fov_deg must lie in (0, 180)", key="fov_deg")
        if not 2 <= self.n_spheres <= 4:
            raise ConfigError("n_spheres must be 2, 3 or 4", key="n_spheres")
        if self.pose_mode not in ("identity_init", "known"):
            raise ConfigError(f"pose_mode must be 'identity_init' or 'known', got {self.pose_mode!r}",
                              key="pose_mode")
        _positive(self.rays, "rays")
        _positive(self.n_samples, "n_samples")
        _positive(self.eval_every, "eval_every")
        if not 0 < self.t_near < self.t_far:
            raise ConfigError("need 0 < t_near < t_far", key="t_far")
        if not self.t_near < self.scene_depth < self.t_far:
            raise ConfigError("scene_depth must lie between t_near and t_far", key="scene_depth")
        _positive(self.density_scale, "density_scale")
        if self.texture_freq < 0:
            raise ConfigError("texture_freq must be non-negative", key="texture_freq")
        if self.rotation_perturb_deg < 0 or self.translation_perturb < 0:
            raise ConfigError("perturbation magnitudes must be non-negative",
                              key="rotation_perturb_deg")
        if len(self.background) != 3:
            raise ConfigError("background is an rgb triplet", key="background")

    def schedules(self):
        return (LrSchedule(*self.lr_theta, self.iterations),
                LrSchedule(*self.lr_pose, self.iterations))


@dataclass
class AnalyzeConfig:
    mode: str = "derivatives"  # derivatives | spectrum | init_sweep | theta_star
    seed: int = 0
    precision: str = "f64"
    # derivatives
    checkpoints: dict = field(default_factory=dict)
    image: str = "synthetic"
    image_size: int = 256
    grid_res: int = 128
    # spectrum
    n_nets: int = 20
    hidden: int = 64
    sigma: float = DEFAULT_SIGMA
    fft_samples: int = 4096
    pe_freqs: int = 4
    pe_order: int = 3
    pe_iterations: int = 3000
    # init sweep / theta_star
    theta_star: dict = field(default_factory=dict)
    sweep_networks: list = field(default_factory=lambda: ["gaussian", "sine_random"])
    alphas: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    seeds: list = field(default_factory=lambda: list(range(10)))
    align: Align2DConfig = field(default_factory=Align2DConfig)

    def validate(self):
        if self.mode not in ("derivatives", "spectrum", "init_sweep", "theta_star"):
            raise ConfigError(f"unknown analyze mode {self.mode!r}", key="mode")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", key="precision")
        if self.mode == "derivatives" and not self.checkpoints:
            raise ConfigError("derivatives mode needs a 'checkpoints' mapping name -> path",
                              key="mode")
        if self.mode == "init_sweep":
            for name in self.sweep_networks:
                if name not in self.theta_star:
                    raise ConfigError(f"init_sweep needs a theta_star checkpoint for {name!r}",
                                      key="theta_star")
            if not self.seeds:
                raise ConfigError("init_sweep needs at least one seed", key="seeds")
            for a in self.alphas:
                if not 0.0 <= a <= 1.0:
                    raise ConfigError(f"alpha {a} outside [0, 1]", key="alphas")
        _positive(self.n_nets, "n_nets")
        _positive(self.fft_samples, "fft_samples")
        try:
            self.align.validate()
        except ConfigError as exc:
            raise ConfigError(f"align: {exc.detail}", key=f"align.{exc.key}") from exc


@dataclass
class RenderJobConfig:
    """Render views of a trained field, or of the analytic scene when ``checkpoint`` is null."""

    seed: int = 0
    precision: str = "f64"
    checkpoint: str | None = None
    poses: str | None = None  # se(3) pose file; null renders the scene's ground-truth views
    scene: NerfConfig = field(default_factory=NerfConfig)

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", key="precision")
        try:
            self.scene.validate()
        except ConfigError as exc:
            raise ConfigError(f"scene: {exc.detail}", key=f"scene.{exc.key}") from exc


def _positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value}", key=name)


def _common(cfg):
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", key="precision")
    if not cfg.networks:
        raise ConfigError("at least one network preset is required", key="networks")
    for name in cfg.networks:
        if name not in PRESETS:
            raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}",
                              key="networks")
    if cfg.iterations < 1:
        raise ConfigError("iterations must be >= 1", key="iterations")
    _positive(cfg.metrics_every, "metrics_every")
    _positive(cfg.checkpoint_every, "checkpoint_every")
    for name in ("lr_theta", "lr_pose"):
        lr = getattr(cfg, name)
        if lr is not None and (len(lr) != 2 or min(lr) <= 0):
            raise ConfigError(f"{name} must be [start, end] with positive entries", key=name)
    cfg.network.validate()


# -- provenance ----------------------------------------------------------------

# Keys whose defaults reproduce published hyper-parameters; every other key is a
# local choice.  A null learning-rate entry defers to the preset's published schedule.
PUBLISHED_VALUES = {
    Align2DConfig: {
        "n_patches": 6, "gauge_fix": True, "sample_fraction": 0.15, "pose_mode": "joint",
        "lr_theta": None, "lr_pose": None,
        "network.hidden": 256, "network.hidden_layers": 4, "network.pe_freqs": 8,
        "network.anneal_start": 0, "network.anneal_end": 2000,
    },
    NerfConfig: {
        "rays": 2048, "n_samples": 128, "pose_mode": "identity_init",
        "lr_theta": [1e-4, 5e-5], "lr_pose": [3e-3, 1e-5],
        "network.hidden": 256, "network.hidden_layers": 6,
    },
    AnalyzeConfig: {
        "alphas": [round(0.1 * i, 1) for i in range(11)], "seeds": list(range(10)),
    },
    RenderJobConfig: {},
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        full = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict) and k not in ("checkpoints", "theta_star"):
            out.update(_flatten(v, full))
        else:
            out[full] = v
    return out


def provenance(cfg):
    """Map every leaf key of ``cfg`` to "published" or "chosen"."""
    published = dict(PUBLISHED_VALUES.get(type(cfg), {}))
    if isinstance(cfg, AnalyzeConfig):
        published.update({f"align.{k}": v for k, v in PUBLISHED_VALUES[Align2DConfig].items()})
    if isinstance(cfg, RenderJobConfig):
        published.update({f"scene.{k}": v for k, v in PUBLISHED_VALUES[NerfConfig].items()})
    out = {}
    for key, value in _flatten(dataclasses.asdict(cfg)).items():
        out[key] = "published" if key in published and published[key] == value else "chosen"
    return out


# -- YAML loading ------------------------------------------------------------


def _line(node):
    return node.start_mark.line + 1


def _scalar(node, tp, key):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{key}: expected a scalar", _line(node))
    value = yaml.safe_load(node.value) if node.style is None else node.value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {node.value!r}", _line(node))
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {node.value!r}", _line(node))
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {node.value!r}", _line(node))
        return float(value)
    if tp is str:
        return str(node.value)
    return value


def _resolve(tp):
    """Reduce ``X | None`` to (X, optional)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _convert(node, tp, key):
    tp, optional = _resolve(tp)
    if optional and isinstance(node, yaml.ScalarNode) and node.value in ("null", "~", ""):
        return None
    if dataclasses.is_dataclass(tp):
        return _build(node, tp, key)
    if tp is list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{key}: expected a list", _line(node))
        return [yaml.safe_load(yaml.serialize(item)) for item in node.value]
    if tp is dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{key}: expected a mapping", _line(node))
        return {k.value: yaml.safe_load(yaml.serialize(v)) for k, v in node.value}
    return _scalar(node, tp, key)


def _key_lines(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            full = f"{prefix}.{knode.value}" if prefix else str(knode.value)
            out[full] = _line(knode)
            _key_lines(vnode, full, out)
    return out


def _build(node, cls, prefix=""):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping", _line(node))
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for knode, vnode in node.value:
        key = knode.value
        full = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown key {full!r}", _line(knode))
        if key in kwargs:
            raise ConfigError(f"duplicate key {full!r}", _line(knode))
        kwargs[key] = _convert(vnode, hints[key], full)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}", _line(node)) from exc


def parse_config(text, cls):
    """Parse YAML ``text`` into dataclass ``cls`` and validate it."""
    try:
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line) from exc
    if root is None:
        cfg = cls()
    else:
        cfg = _build(root, cls)
    try:
        cfg.validate()
    except ConfigError as exc:
        lines = _key_lines(root)
        key = exc.key
        # fall back to the enclosing section when the key itself was defaulted
        while key and key not in lines and "." in key:
            key = key.rsplit(".", 1)[0]
        if exc.line is None and key in lines:
            raise ConfigError(exc.detail, lines[key], exc.key) from exc
        raise
    return cfg


def load_config(path, cls):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, cls)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)
