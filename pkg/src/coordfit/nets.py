"""Coordinate MLPs: ReLU (+ positional embedding), sine and Gaussian activations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigError, ContractViolation, FormatError

ACTIVATIONS = ("relu", "sine", "gaussian")
INIT_SCHEMES = ("default_uniform", "siren_principled")

DEFAULT_SIGMA = 0.1
# 2*pi*omega0 = 30, the usual SIREN frequency factor
DEFAULT_OMEGA0 = 30.0 / (2.0 * math.pi)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear ramp of the active band count alpha from 0 to D."""

    start_iter: int = 0
    end_iter: int = 2000

    def alpha(self, iteration, n_freqs):
        if iteration is None:
            return float(n_freqs)
        if self.end_iter <= self.start_iter:
            return float(n_freqs) if iteration >= self.end_iter else 0.0
        frac = (iteration - self.start_iter) / (self.end_iter - self.start_iter)
        return float(n_freqs) * min(max(frac, 0.0), 1.0)


@dataclass(frozen=True)
class PositionalEmbedding:
    n_freqs: int
    include_identity: bool = True
    anneal: AnnealSchedule | None = None

    def out_dim(self, n):
        return n * (int(self.include_identity) + 2 * self.n_freqs)

    def frequencies(self):
        # bands sin(2pi x), sin(4pi x), ..., sin(2^D pi x)
        return np.pi * 2.0 ** np.arange(1, self.n_freqs + 1)


def anneal_weight(k, alpha):
    """Per-band coarse-to-fine weight: 0 below the band, cosine ease across it, 1 above."""
    t = np.clip(alpha - np.asarray(k, dtype=np.float64), 0.0, 1.0)
    return (1.0 - np.cos(t * np.pi)) / 2.0


def positional_embedding(x, pe, iteration=None):
    """Embed rows of ``x`` (B, n) into (B, n*(1+2D)), annealed when ``pe.anneal`` is set.

    Layout: ``[x, sin(f_0 x), cos(f_0 x), ..., sin(f_{D-1} x), cos(f_{D-1} x)]``.
    """
    x = ad._lift(x)
    n = x.shape[-1]
    freqs = pe.frequencies().astype(x.dtype)
    arg = ad.reshape(x, x.shape[:-1] + (1, n)) * freqs.reshape(-1, 1)
    bands = ad.stack([ad.sin(arg), ad.cos(arg)], axis=-2)
    if pe.anneal is not None:
        alpha = pe.anneal.alpha(iteration, pe.n_freqs)
        w = anneal_weight(np.arange(pe.n_freqs), alpha).astype(x.dtype)
        bands = bands * w.reshape(-1, 1, 1)
    flat = ad.reshape(bands, x.shape[:-1] + (2 * n * pe.n_freqs,))
    if pe.include_identity:
        return ad.concat([x, flat], axis=-1)
    return flat


def activation_apply(kind, z, sigma=DEFAULT_SIGMA, omega0=DEFAULT_OMEGA0):
    if kind == "relu":
        return ad.relu(z)
    if kind == "sine":
        return ad.sine(z, omega0)
    if kind == "gaussian":
        return ad.gaussian(z, sigma)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class CoordinateNetwork:
    """MLP ``F(x) = W_L phi(... phi(W_1 gamma(x) + b_1) ...) + b_L``.

    ``weights[l]`` has shape (out, in).  ``biases`` is empty for bias-free
    networks.  No nonlinearity follows the last affine layer.
    """

    weights: list
    biases: list
    activation: str
    input_dim: int
    sigma: float = DEFAULT_SIGMA
    omega0: float = DEFAULT_OMEGA0
    embedding: PositionalEmbedding | None = None
    seed: int | None = None
    init_scheme: str = "default_uniform"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.embedding is not None and self.activation != "relu":
            raise ConfigError("positional embedding is only paired with relu activations")
        fan_in = self.embed_dim
        for w in self.weights:
            if w.shape[1] != fan_in:
                raise ContractViolation(f"layer expects fan-in {w.shape[1]}, previous width {fan_in}")
            fan_in = w.shape[0]
        if self.biases and len(self.biases) != len(self.weights):
            raise ContractViolation("one bias per layer required")

    @property
    def embed_dim(self):
        if self.embedding is None:
            return self.input_dim
        return self.embedding.out_dim(self.input_dim)

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def dims(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def has_bias(self):
        return bool(self.biases)

    def params(self):
        return list(self.weights) + list(self.biases)

    def __call__(self, x, iteration=None):
        return mlp_forward(self, x, iteration)

    def copy(self):
        return CoordinateNetwork(
            weights=[Value(w.data.copy(), requires_grad=True) for w in self.weights],
            biases=[Value(b.data.copy(), requires_grad=True) for b in self.biases],
            activation=self.activation,
            input_dim=self.input_dim,
            sigma=self.sigma,
            omega0=self.omega0,
            embedding=self.embedding,
            seed=self.seed,
            init_scheme=self.init_scheme,
            meta=dict(self.meta),
        )

    def astype(self, dtype):
        net = self.copy()
        for p in net.params():
            p.data = p.data.astype(dtype)
        return net

    def describe(self):
        return {
            "dims": self.dims,
            "activation": self.activation,
            "sigma": self.sigma,
            "omega0": self.omega0,
            "bias": self.has_bias,
            "embedding": None if self.embedding is None else {
                "n_freqs": self.embedding.n_freqs,
                "include_identity": self.embedding.include_identity,
                "anneal": None if self.embedding.anneal is None else [
                    self.embedding.anneal.start_iter, self.embedding.anneal.end_iter],
            },
            "seed": self.seed,
            "init_scheme": self.init_scheme,
        }


def mlp_forward(net, x, iteration=None):
    x = ad._lift(x, net.weights[0])
    if x.shape[-1] != net.input_dim:
        raise ContractViolation(f"network expects {net.input_dim} input columns, got {x.shape[-1]}")
    h = x
    if net.embedding is not None:
        h = positional_embedding(h, net.embedding, iteration)
    last = len(net.weights) - 1
    for layer, w in enumerate(net.weights):
        if net.biases:
            b = net.biases[layer]
        else:
            b = np.zeros(w.shape[0], dtype=w.dtype)
        h = ad.affine(h, w, b)
        if layer < last:
            h = activation_apply(net.activation, h, net.sigma, net.omega0)
    return h


def init_network(kind, dims, scheme="default_uniform", seed=0, *, sigma=DEFAULT_SIGMA,
                 omega0=DEFAULT_OMEGA0, embedding=None, bias=True, dtype=np.float64):
    """Build a randomly initialised network.

    ``dims`` lists the raw input dimension, the hidden widths and the output
    dimension; with an embedding the first layer's fan-in is the embedded
    width.  ``default_uniform`` draws every weight and bias from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)).  ``siren_principled`` draws the first
    layer from U(-1/fan_in, 1/fan_in) and later layers from
    U(-c, c), c = sqrt(6/fan_in) / (2 pi omega0), which keeps the usual
    pre-activation statistics under the ``sin(2 pi omega0 z)`` convention.
    """
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}")
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if scheme == "siren_principled" and kind != "sine":
        raise ConfigError("siren_principled initialisation requires the sine activation")
    if len(dims) < 2:
        raise ConfigError("dims needs at least input and output dimensions")
    rng = np.random.default_rng(seed)
    input_dim = int(dims[0])
    fan_in = input_dim if embedding is None else embedding.out_dim(input_dim)
    weights, biases = [], []
    for layer, width in enumerate(dims[1:]):
        if scheme == "siren_principled":
            bound = 1.0 / fan_in if layer == 0 else math.sqrt(6.0 / fan_in) / (2 * math.pi * omega0)
        else:
            bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(int(width), fan_in))
        b = rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), size=int(width))
        weights.append(Value(w.astype(dtype), requires_grad=True))
        if bias:
            biases.append(Value(b.astype(dtype), requires_grad=True))
        fan_in = int(width)
    return CoordinateNetwork(weights, biases, kind, input_dim, sigma=sigma, omega0=omega0,
                             embedding=embedding, seed=seed, init_scheme=scheme)


def interpolate_weights(theta_star, theta_bar, alpha):
    """Network with parameters alpha * theta_bar + (1 - alpha) * theta_star."""
    if theta_star.describe()["dims"] != theta_bar.describe()["dims"] or \
            theta_star.has_bias != theta_bar.has_bias or \
            theta_star.activation != theta_bar.activation:
        raise ContractViolation("interpolate_weights: architectures differ")
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")
    net = theta_star.copy()
    for p, s, b in zip(net.params(), theta_star.params(), theta_bar.params()):
        if alpha == 0.0:
            p.data = s.data.copy()
        elif alpha == 1.0:
            p.data = b.data.copy()
        else:
            p.data = alpha * b.data + (1.0 - alpha) * s.data
    net.meta = dict(theta_star.meta, interpolation_alpha=alpha)
    return net


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, net):
    """Write ``net`` as an .npz archive.

    Entries: ``meta`` (UTF-8 JSON bytes, see ``CoordinateNetwork.describe``
    plus ``format_version``), ``W0..W{L-1}`` and ``b0..b{L-1}`` as
    little-endian float64 arrays of shape (out, in) and (out,).
    """
    meta = dict(net.describe(), format_version=CHECKPOINT_VERSION, extra=net.meta)
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, w in enumerate(net.weights):
        arrays[f"W{i}"] = w.data.astype("<f8")
    for i, b in enumerate(net.biases):
        arrays[f"b{i}"] = b.data.astype("<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, dtype=np.float64):
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            n_layers = len(meta["dims"]) - 1
            weights = [Value(data[f"W{i}"].astype(dtype), requires_grad=True) for i in range(n_layers)]
            biases = []
            if meta["bias"]:
                biases = [Value(data[f"b{i}"].astype(dtype), requires_grad=True)
                          for i in range(n_layers)]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('format_version')}")
    emb = None
    if meta["embedding"] is not None:
        e = meta["embedding"]
        anneal = None if e["anneal"] is None else AnnealSchedule(*e["anneal"])
        emb = PositionalEmbedding(e["n_freqs"], e["include_identity"], anneal)
    return CoordinateNetwork(weights, biases, meta["activation"], meta["dims"][0],
                             sigma=meta["sigma"], omega0=meta["omega0"], embedding=emb,
                             seed=meta["seed"], init_scheme=meta["init_scheme"],
                             meta=meta.get("extra", {}))
